"""
Experiment orchestration: trial-budget sweeps, figure suites and physics validation.

Every (K, seed) point is an independent training run. Points may run in
worker processes; results are always written in (K, seed, epoch) order so
reruns produce identical files.
"""

import csv
import json
import logging
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from config import TrainingConfig
from estimators import EstimatorConfig, GradientRule, OutputHead
from mnist_data import Dataset
from network import (
    EvalMode,
    NetworkConfig,
    TrialBudget,
    evaluate,
    init_network,
    load_checkpoint,
    save_checkpoint,
    train_epoch,
)
from neuron_models import (
    SELECTED_TSP_VARIANT,
    NeuronKind,
    NeuronModel,
    TspParams,
    spd_probability,
    set_probability,
    tsp_probability,
)
from physics_oracles import (
    TelegraphConfig,
    poisson_click_rate,
    rk4_convergence_slope,
    select_tsp_variant,
    telegraph_simulate,
)
from psn_exceptions import ConfigurationError

logger = logging.getLogger(__name__)

__version__ = "1.0.0"

METRICS_HEADER = ["experiment", "neuron", "hidden_rule", "output_rule", "output_head",
                  "K", "seed", "epoch", "train_loss", "test_acc_sampled", "test_acc_meanfield"]
SUMMARY_HEADER = ["experiment", "neuron", "hidden_rule", "output_rule", "output_head",
                  "K", "acc_mean", "acc_std", "n_seeds", "final_acc_mean"]
REPORT_HEADER = ["check", "value", "tolerance", "passed"]

DEFAULT_TRIAL_SWEEP = [1, 2, 3, 5, 7, 10]
TWO_HIDDEN_DIMS = [784, 400, 400, 10]

# Physics validation settings
TSP_ALPHA_GRID = np.linspace(-50.0, 50.0, 101)
TSP_ORACLE_DT = 1e-5
TSP_AGREEMENT_TOLERANCE = 1e-6
RK4_SLOPE_ALPHA = 50.0
RK4_SLOPE_TARGET = 4.0
RK4_SLOPE_TOLERANCE = 0.3
TELEGRAPH_GRID = np.arange(-5, 6, dtype=float)
TELEGRAPH_TOLERANCE = 0.01
POISSON_GRID = np.linspace(0.1, 3.0, 10)
POISSON_TRIALS = 1_000_000
POISSON_SIGMAS = 4.0
CURVE_RANGES = {
    NeuronKind.SPD: (-3.0, 3.0),
    NeuronKind.SET: (-5.0, 5.0),
    NeuronKind.TSP: (-50.0, 50.0),
}
CURVE_POINTS = 201


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def version_string() -> str:
    """`git describe` of the working tree when available, else the package version."""
    try:
        result = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                                capture_output=True, text=True, timeout=10,
                                cwd=Path(__file__).resolve().parent)
        if result.returncode == 0 and result.stdout.strip():
            return f"{__version__}+{result.stdout.strip()}"
    except (OSError, subprocess.TimeoutExpired):
        pass
    return __version__


@dataclass
class ExperimentSpec:
    """One named sweep over trial budgets with several seeds per point."""
    name: str
    network: NetworkConfig
    trial_sweep: List[int] = field(default_factory=lambda: list(DEFAULT_TRIAL_SWEEP))
    repetitions: int = 3
    output_dir: Path = Path("runs")
    sample_output: bool = False
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    jobs: int = 1
    save_checkpoints: bool = True

    def validate(self) -> None:
        """
        Raises:
            ConfigurationError: Empty sweep, bad repetitions, or invalid network settings
        """
        if not self.trial_sweep:
            raise ConfigurationError(f"{self.name}: trial_sweep must not be empty")
        if any(int(k) < 1 for k in self.trial_sweep):
            raise ConfigurationError(f"{self.name}: trial budgets must be >= 1, got {self.trial_sweep}")
        if self.repetitions < 1:
            raise ConfigurationError(f"{self.name}: repetitions must be >= 1")
        if self.jobs < 1:
            raise ConfigurationError(f"{self.name}: jobs must be >= 1")
        for k in self.trial_sweep:
            self.point_config(k, self.network.seed).validate()

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name

    @property
    def seeds(self) -> List[int]:
        return [self.network.seed + r for r in range(self.repetitions)]

    def point_config(self, trials: int, seed: int) -> NetworkConfig:
        """Network configuration for one sweep point: K hidden trials, and K output samples if sampled."""
        output = TrialBudget.finite(trials) if self.sample_output else self.network.output_trials
        return replace(self.network, hidden_trials=TrialBudget.finite(trials),
                       output_trials=output, seed=seed)

    def to_dict(self) -> dict:
        return {
            'name': self.name,
            'network': self.network.to_dict(),
            'trial_sweep': [int(k) for k in self.trial_sweep],
            'repetitions': self.repetitions,
            'output_dir': str(self.output_dir),
            'sample_output': self.sample_output,
            'train_limit': self.train_limit,
            'test_limit': self.test_limit,
            'jobs': self.jobs,
            'save_checkpoints': self.save_checkpoints,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ExperimentSpec':
        return cls(
            name=data['name'],
            network=NetworkConfig.from_dict(data['network']),
            trial_sweep=[int(k) for k in data['trial_sweep']],
            repetitions=int(data['repetitions']),
            output_dir=Path(data['output_dir']),
            sample_output=bool(data.get('sample_output', False)),
            train_limit=data.get('train_limit'),
            test_limit=data.get('test_limit'),
            jobs=int(data.get('jobs', 1)),
            save_checkpoints=bool(data.get('save_checkpoints', True)),
        )

    @classmethod
    def from_config(cls, config: TrainingConfig, output_dir: Path) -> 'ExperimentSpec':
        """Build a spec from a validated TrainingConfig; output_trials > 0 means the output is sampled."""
        network = config.network_config()
        return cls(
            name=config.get('experiment.name'),
            network=network,
            trial_sweep=list(config.get('experiment.trial_sweep')),
            repetitions=config.get('experiment.repetitions'),
            output_dir=Path(output_dir),
            sample_output=not network.output_trials.is_infinite,
            train_limit=config.get('data.train_limit') or None,
            test_limit=config.get('data.test_limit') or None,
            jobs=config.get('experiment.jobs'),
            save_checkpoints=config.get('experiment.save_checkpoints'),
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_acc_sampled: float
    test_acc_meanfield: float


@dataclass
class PointResult:
    """Training history of one (K, seed) run."""
    trials: int
    seed: int
    records: List[EpochRecord]
    checkpoint: Optional[Path] = None

    @property
    def best_accuracy(self) -> float:
        return max(r.test_acc_sampled for r in self.records)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_acc_sampled


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    points: List[PointResult]
    metrics_path: Path
    summary_path: Path


def train_point(spec: ExperimentSpec, trials: int, seed: int,
                train: Dataset, test: Dataset) -> PointResult:
    """Train one network for the spec's epochs and evaluate after every epoch."""
    config = spec.point_config(trials, seed)
    net = init_network(config)
    records = []
    for epoch in range(config.epochs):
        train_loss = train_epoch(net, train, epoch)
        sampled = evaluate(net, test, EvalMode.SAMPLED)
        meanfield = evaluate(net, test, EvalMode.MEAN_FIELD)
        records.append(EpochRecord(epoch, train_loss, sampled, meanfield))
        logger.info(f"[{spec.name}] K={trials} seed={seed} epoch {epoch + 1}/{config.epochs}: "
                    f"loss {train_loss:.4f}, acc {sampled:.4f} (mean-field {meanfield:.4f})")

    checkpoint = None
    if spec.save_checkpoints:
        checkpoint = save_checkpoint(net, spec.run_dir / "checkpoints" / f"K{trials}_seed{seed}.npz")
    return PointResult(trials, seed, records, checkpoint)


# Datasets shipped once per worker process
_WORKER_DATA: Dict[str, Dataset] = {}


def _init_worker(train: Dataset, test: Dataset) -> None:
    _WORKER_DATA['train'] = train
    _WORKER_DATA['test'] = test


def _run_job(job: Tuple[ExperimentSpec, int, int]) -> PointResult:
    spec, trials, seed = job
    return train_point(spec, trials, seed, _WORKER_DATA['train'], _WORKER_DATA['test'])


def _config_columns(spec: ExperimentSpec) -> List[str]:
    estimator = spec.network.estimator
    return [spec.name, spec.network.neuron_model.name, estimator.hidden_rule.value,
            estimator.output_rule.value, estimator.output_head.value]


def write_metrics(spec: ExperimentSpec, points: Sequence[PointResult], path: Path) -> Path:
    prefix = _config_columns(spec)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for point in points:
            for r in point.records:
                writer.writerow(prefix + [point.trials, point.seed, r.epoch, _fmt(r.train_loss),
                                          _fmt(r.test_acc_sampled), _fmt(r.test_acc_meanfield)])
    return path


def write_summary(spec: ExperimentSpec, points: Sequence[PointResult], path: Path) -> Path:
    """One row per K: best-epoch accuracy mean and std over seeds, plus final-epoch mean."""
    prefix = _config_columns(spec)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for trials in sorted({p.trials for p in points}):
            group = [p for p in points if p.trials == trials]
            best = np.array([p.best_accuracy for p in group])
            final = np.array([p.final_accuracy for p in group])
            writer.writerow(prefix + [trials, _fmt(best.mean()), _fmt(best.std()), len(group),
                                      _fmt(final.mean())])
    return path


def run_train(spec: ExperimentSpec, train: Dataset, test: Dataset) -> ExperimentResult:
    """
    Train every (K, seed) point of a spec and write its run directory.

    Files written under <output_dir>/<name>/: metrics.csv, summary.csv,
    resolved_spec.json, version.txt and checkpoints/ when enabled.

    Raises:
        ConfigurationError: Before any training, if the spec is invalid
    """
    spec.validate()
    train = train.subset(spec.train_limit)
    test = test.subset(spec.test_limit)
    run_dir = spec.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)

    with open(run_dir / "resolved_spec.json", "w") as f:
        json.dump(spec.to_dict(), f, indent=2, sort_keys=True)
    (run_dir / "version.txt").write_text(version_string() + "\n")

    jobs = [(spec, int(k), seed) for k in spec.trial_sweep for seed in spec.seeds]
    logger.info(f"[{spec.name}] {len(jobs)} runs on {len(train)} training / {len(test)} test samples, "
                f"{spec.jobs} worker(s)")

    if spec.jobs == 1 or len(jobs) == 1:
        points = [train_point(s, k, seed, train, test) for s, k, seed in jobs]
    else:
        with ProcessPoolExecutor(max_workers=spec.jobs, initializer=_init_worker,
                                 initargs=(train, test)) as executor:
            points = list(executor.map(_run_job, jobs))

    metrics_path = write_metrics(spec, points, run_dir / "metrics.csv")
    summary_path = write_summary(spec, points, run_dir / "summary.csv")
    logger.info(f"[{spec.name}] wrote {metrics_path} and {summary_path}")
    return ExperimentResult(spec, points, metrics_path, summary_path)


class Figure(Enum):
    FIG4 = "FIG4"
    FIG5 = "FIG5"
    FIG6 = "FIG6"
    FIG7 = "FIG7"
    FIG8A = "FIG8A"
    FIG8B = "FIG8B"


def _variant(base: ExperimentSpec, figure: Figure, kind: NeuronKind, hidden: GradientRule,
             output: GradientRule, head: OutputHead = OutputHead.SOFTMAX_CE,
             sample_output: bool = False, layer_dims: Optional[List[int]] = None) -> ExperimentSpec:
    estimator = EstimatorConfig(hidden, output, head, base.network.estimator.smoothing_epsilon)
    tsp = base.network.neuron_model.tsp_params if kind is NeuronKind.TSP else None
    network = replace(base.network,
                      neuron_model=NeuronModel.parse(kind.value, tsp),
                      estimator=estimator,
                      output_trials=TrialBudget.infinite(),
                      layer_dims=list(layer_dims or base.network.layer_dims))
    sweep = list(base.trial_sweep)
    if hidden is GradientRule.EG:
        # A single trial makes every empirical sigmoid gradient vanish
        sweep = [k for k in sweep if k > 1]
    suffix = "_sampled" if sample_output else ""
    head_tag = "_linear" if head is OutputHead.LINEAR_MSE else ""
    name = f"{figure.value.lower()}_{kind.value.lower()}_{hidden.value.lower()}_{output.value.lower()}{head_tag}{suffix}"
    return replace(base, name=name, network=network, trial_sweep=sweep, sample_output=sample_output)


def figure_specs(figure: Figure, base: ExperimentSpec) -> List[ExperimentSpec]:
    """Expand a figure into the estimator and budget combinations of its legend."""
    TP, EG, ST = GradientRule.TP, GradientRule.EG, GradientRule.ST
    SET = NeuronKind.SET

    if figure is Figure.FIG4:
        specs = [_variant(base, figure, kind, TP, TP) for kind in NeuronKind]
    elif figure is Figure.FIG5:
        specs = [
            _variant(base, figure, SET, TP, TP),
            _variant(base, figure, SET, EG, TP),
            _variant(base, figure, SET, EG, EG, sample_output=True),
        ]
    elif figure is Figure.FIG6:
        specs = [
            _variant(base, figure, SET, TP, TP),
            _variant(base, figure, SET, ST, TP),
            _variant(base, figure, SET, ST, EG, sample_output=True),
            _variant(base, figure, SET, ST, ST, sample_output=True),
            _variant(base, figure, SET, EG, ST, sample_output=True),
        ]
    elif figure is Figure.FIG7:
        specs = [
            _variant(base, figure, SET, TP, TP),
            _variant(base, figure, SET, EG, TP),
            _variant(base, figure, SET, TP, EG, sample_output=True),
            _variant(base, figure, SET, EG, EG, sample_output=True),
        ]
    else:
        dims = TWO_HIDDEN_DIMS if figure is Figure.FIG8B else [784, 400, 10]
        specs = [
            _variant(base, figure, SET, rule, TP, head, layer_dims=dims)
            for head in OutputHead for rule in (TP, EG)
        ]
    return specs


def run_figure_suite(figure: Figure, base: ExperimentSpec, train: Dataset,
                     test: Dataset) -> List[ExperimentResult]:
    """Validate every spec of a figure up front, then train them in order."""
    specs = figure_specs(figure, base)
    for spec in specs:
        spec.validate()
    logger.info(f"{figure.value}: {len(specs)} configurations")
    return [run_train(spec, train, test) for spec in specs]


def evaluate_checkpoint(path: Path, test: Dataset) -> Dict[str, float]:
    """Sampled and mean-field accuracy of a saved network."""
    net = load_checkpoint(path)
    return {
        'test_acc_sampled': evaluate(net, test, EvalMode.SAMPLED),
        'test_acc_meanfield': evaluate(net, test, EvalMode.MEAN_FIELD),
    }


@dataclass
class CheckResult:
    check: str
    value: float
    tolerance: float
    passed: bool


@dataclass
class PhysicsReport:
    checks: List[CheckResult]
    selected_variant: str
    variant_deviations: Dict[str, float]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> List[CheckResult]:
        return [c for c in self.checks if not c.passed]


def _tsp_checks(params: TspParams) -> Tuple[List[CheckResult], str, Dict[str, float]]:
    best, deviations = select_tsp_variant(params, TSP_ALPHA_GRID, TSP_ORACLE_DT)
    selected_gap = deviations[SELECTED_TSP_VARIANT]
    checks = [
        CheckResult("tsp_selected_variant_max_deviation", selected_gap, TSP_AGREEMENT_TOLERANCE,
                    selected_gap < TSP_AGREEMENT_TOLERANCE),
        CheckResult("tsp_selected_variant_is_best", float(best is SELECTED_TSP_VARIANT), 1.0,
                    best is SELECTED_TSP_VARIANT),
    ]
    slope = rk4_convergence_slope(params, RK4_SLOPE_ALPHA)
    checks.append(CheckResult("rk4_convergence_slope", slope, RK4_SLOPE_TOLERANCE,
                              abs(slope - RK4_SLOPE_TARGET) <= RK4_SLOPE_TOLERANCE))
    return checks, best.value, {v.value: gap for v, gap in deviations.items()}


def _telegraph_checks(seed: int) -> List[CheckResult]:
    checks = []
    for index, eps in enumerate(TELEGRAPH_GRID):
        rng = np.random.default_rng([seed, 1, index])
        simulated = telegraph_simulate(TelegraphConfig(epsilon_over_kT=float(eps)), rng)
        gap = abs(simulated - float(expit(eps)))
        checks.append(CheckResult(f"telegraph_eps_{eps:+.0f}", gap, TELEGRAPH_TOLERANCE,
                                  gap < TELEGRAPH_TOLERANCE))
    return checks


def _poisson_checks(seed: int) -> List[CheckResult]:
    checks = []
    for index, lam in enumerate(POISSON_GRID):
        rng = np.random.default_rng([seed, 2, index])
        rate = poisson_click_rate(float(lam), POISSON_TRIALS, rng)
        expected = -np.expm1(-lam)
        bound = POISSON_SIGMAS * np.sqrt(expected * (1.0 - expected) / POISSON_TRIALS)
        gap = abs(rate - expected)
        checks.append(CheckResult(f"poisson_lambda_{lam:.3f}", gap, bound, gap <= bound))
    return checks


def write_activation_curves(path: Path, params: TspParams) -> Path:
    """p(z) of all three neurons over their working ranges, as neuron,z,p rows."""
    evaluators = {
        NeuronKind.SPD: spd_probability,
        NeuronKind.SET: set_probability,
        NeuronKind.TSP: lambda z: tsp_probability(params, z),
    }
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["neuron", "z", "p"])
        for kind, (low, high) in CURVE_RANGES.items():
            z = np.linspace(low, high, CURVE_POINTS)
            for zi, pi in zip(z, evaluators[kind](z)):
                writer.writerow([kind.value, _fmt(zi), f"{pi:.9f}"])
    return path


def run_physics_validation(out_dir: Path, seed: int = 0,
                           params: Optional[TspParams] = None) -> PhysicsReport:
    """
    Check every closed-form activation against its independent oracle.

    Writes physics_report.csv and physics_curves.csv to out_dir.
    """
    params = params or TspParams.reference()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    checks, selected, deviations = _tsp_checks(params)
    checks += _telegraph_checks(seed)
    checks += _poisson_checks(seed)
    report = PhysicsReport(checks, selected, deviations)

    with open(out_dir / "physics_report.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for c in checks:
            writer.writerow([c.check, f"{c.value:.6e}", f"{c.tolerance:.6e}", str(c.passed).lower()])
    write_activation_curves(out_dir / "physics_curves.csv", params)

    logger.info(f"Physics validation: {len(checks) - len(report.failures())}/{len(checks)} checks passed, "
                f"TSP variant '{selected}'")
    return report
