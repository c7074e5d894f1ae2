"""``adabatch`` command line: train, grid, compare, verify-lemmas and gen."""
import argparse
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from .cache import setup_cache_from_env
from .exceptions import (AdaBatchError, ConfigError, DivergenceError, EmptyDatasetError, GridDivergedError,
                         ParseError, UsageError, VerificationError)
from .losses import L2Metric, LossKind, curvature_constants
from .metrics import RunMetrics, throughput_report, write_table
from .parallel_engine import ParallelConfig, ParallelRule, hogwild_train, wild_train
from .sgd_engine import AdagradConfig, EvalSchedule, SgdConfig, sgd_grid, train
from .sparse_core import (Dataset, PLaw, estimate_feature_probabilities, gen_synthetic, normalize_rows,
                          parse_libsvm, serialize_libsvm, train_test_split)
from .stats_oracle import run_lemma_suite
from .svrg_engine import SvrgConfig, SvrgRule, reference_optimum, schedule_adabatch, schedule_minibatch, svrg_train

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_VERIFICATION = 0, 1, 2, 3

RULES = {'mb': 'minibatch', 'ab': 'adabatch', 'cbp': 'cbp', 'invp': 'inv-p', 'adagrad': 'adagrad'}
L2_METRICS = {'id': L2Metric.IDENTITY, 'p': L2Metric.DIAG_P}
ENGINES = ('sgd', 'svrg', 'wild', 'hogwild')
RUN_KEYS = {'engine': str, 'rule': str, 'batch': int, 'workers': int, 'gamma': float, 'budget': int,
            'epochs_m': int, 'seed': int, 'l2': float}


class Parser(argparse.ArgumentParser):
    """Argument errors surface as UsageError so ``main`` owns the exit code."""

    def error(self, message):
        raise UsageError(message)


def data_dir() -> Path:
    env = os.environ.get('ADABATCH_DATA_DIR')
    return Path(env) if env else Path(str(resources.files('adabatch').joinpath('data')))


def resolve_data_path(name: str) -> Path:
    path = Path(name)
    if path.is_absolute() or path.exists():
        return path
    return data_dir() / name


def load_dataset(args) -> tuple[Dataset, Dataset | None]:
    path = resolve_data_path(args.data)
    if not path.exists():
        raise UsageError(f"dataset {args.data!r} not found (looked in {path.parent})")
    with path.open() as stream:
        data = parse_libsvm(stream)
    if args.normalize:
        data = normalize_rows(data)
    logger.info("loaded %s: n=%d d=%d", path, len(data), data.dim)
    if args.test_split <= 0.0:
        return data, None
    train_set, test_set = train_test_split(data, 1.0 - args.test_split, seed=args.split_seed)
    if len(train_set) == 0:
        raise EmptyDatasetError(f"test split {args.test_split} leaves no training examples")
    return train_set, test_set if len(test_set) else None


def check_flags(args):
    if args.engine in ('sgd', 'svrg') and args.workers is not None:
        raise UsageError(f"--workers does not apply to --engine {args.engine}")
    if args.engine != 'svrg' and args.epochs_m is not None:
        raise UsageError("--epochs-m only applies to --engine svrg")
    if args.engine == 'svrg' and args.rule not in ('mb', 'ab'):
        raise UsageError("--engine svrg runs --rule mb or ab")
    if args.engine == 'wild' and args.rule not in ('mb', 'ab'):
        raise UsageError("--engine wild runs --rule mb or ab")
    if args.engine == 'hogwild' and args.batch != 1:
        raise UsageError("--engine hogwild processes one sample at a time; drop --batch")


def run_label(args) -> str:
    return f"{args.engine}-{args.rule}-b{args.batch}-w{args.workers or 1}-s{args.seed}"


def run_config(args, train_set: Dataset, test_set: Dataset | None) -> RunMetrics:
    check_flags(args)
    loss = LossKind(args.loss)
    l2_metric = L2_METRICS[args.l2_metric]
    stats = estimate_feature_probabilities(train_set)
    schedule = EvalSchedule(test=test_set)
    if args.gap:
        schedule.f_star = reference_optimum(train_set, loss, args.l2, l2_metric, stats).f_star
    if args.engine == 'sgd':
        rule = RULES[args.rule]
        cfg = SgdConfig(gamma=0.0 if rule == 'adagrad' else args.gamma, batch=args.batch, rule=rule,
                        sample_budget=args.budget, seed=args.seed, l2=args.l2, l2_metric=l2_metric,
                        adagrad=AdagradConfig(alpha=args.gamma) if rule == 'adagrad' else None)
        return train(train_set, cfg, loss, stats, schedule)
    if args.engine == 'svrg':
        rule = SvrgRule(RULES[args.rule])
        gamma, m = args.gamma, args.epochs_m
        if m is None:
            consts = curvature_constants(loss, train_set, stats, args.l2, l2_metric)
            planned = schedule_minibatch if rule is SvrgRule.MINIBATCH else schedule_adabatch
            gamma, m = planned(consts, stats, args.batch)
            logger.info("svrg schedule: gamma=%g m=%d", gamma, m)
        cfg = SvrgConfig(gamma=gamma, m=m, batch=args.batch, rule=rule, outer_epochs=args.outer_epochs,
                         seed=args.seed, l2=args.l2, l2_metric=l2_metric)
        return svrg_train(train_set, cfg, loss, stats, schedule)
    if args.l2:
        raise UsageError(f"--l2 is not supported by --engine {args.engine}")
    if args.engine == 'wild':
        rule = ParallelRule.WILD_MINIBATCH if args.rule == 'mb' else ParallelRule.WILD_ADABATCH
    else:
        rule = ParallelRule.HOGWILD
    cfg = ParallelConfig(gamma=args.gamma, workers=args.workers or 1, batch=args.batch, rule=rule,
                         sample_budget=args.budget, seed=args.seed, racy_writes=args.racy_writes)
    runner = hogwild_train if rule is ParallelRule.HOGWILD else wild_train
    return runner(train_set, cfg, loss, stats, schedule)


def write_metrics(metrics: RunMetrics, out: Path, label: str) -> tuple[Path, Path]:
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"{label}.csv", out / f"{label}.json"
    with csv_path.open('w') as stream:
        metrics.to_csv(stream)
    with json_path.open('w') as stream:
        metrics.dump_json(stream)
    return csv_path, json_path


def cmd_train(args) -> int:
    train_set, test_set = load_dataset(args)
    label = run_label(args)
    try:
        metrics = run_config(args, train_set, test_set)
    except DivergenceError as exc:
        if exc.metrics is not None:
            write_metrics(exc.metrics, Path(args.out), label)
        raise
    csv_path, _ = write_metrics(metrics, Path(args.out), label)
    final = metrics.final
    print(f"{label}: objective={final.objective:.6g} test_error={final.test_error} -> {csv_path}")
    return EXIT_OK


def cmd_grid(args) -> int:
    if args.engine != 'sgd':
        raise UsageError("grid search runs --engine sgd")
    check_flags(args)
    train_set, _ = load_dataset(args)
    if not 0.0 < args.valid_split < 1.0:
        raise UsageError("grid search scores on a validation split; use 0 < --valid-split < 1")
    fit_set, valid_set = train_test_split(train_set, 1.0 - args.valid_split, seed=args.split_seed)
    if len(fit_set) == 0 or len(valid_set) == 0:
        raise EmptyDatasetError(f"validation split {args.valid_split} leaves an empty part")
    rule = RULES[args.rule]
    cfg = SgdConfig(gamma=args.gamma_lo, batch=args.batch, rule=rule, sample_budget=args.budget, seed=args.seed,
                    l2=args.l2, l2_metric=L2_METRICS[args.l2_metric])
    result = sgd_grid(fit_set, valid_set, cfg, LossKind(args.loss), None, args.gamma_lo, args.gamma_hi)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / f"grid-{args.rule}-b{args.batch}.csv").open('w') as stream:
        write_table(result.table(), stream)
    write_table(result.table(), sys.stdout)
    print(f"selected gamma={result.best.value:g} objective={result.best.objective:.6g}")
    return EXIT_OK


def parse_run_spec(spec: str) -> dict:
    """``engine=sgd,rule=ab,batch=10`` -> {'engine': 'sgd', 'rule': 'ab', 'batch': 10}."""
    overrides = {}
    for item in filter(None, spec.split(',')):
        key, sep, value = item.partition('=')
        key = key.strip().replace('-', '_')
        if not sep or key not in RUN_KEYS:
            raise UsageError(f"bad run spec item {item!r}; keys are {', '.join(RUN_KEYS)}")
        try:
            overrides[key] = RUN_KEYS[key](value.strip())
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {value!r}") from exc
    if 'rule' in overrides and overrides['rule'] not in RULES:
        raise UsageError(f"unknown rule {overrides['rule']!r}")
    if 'engine' in overrides and overrides['engine'] not in ENGINES:
        raise UsageError(f"unknown engine {overrides['engine']!r}")
    return overrides


def compare_runs(args) -> list[argparse.Namespace]:
    if args.run:
        return [argparse.Namespace(**{**vars(args), **parse_run_spec(spec)}) for spec in args.run]
    batches = [int(b) for b in args.batches.split(',')] if args.batches else [args.batch]
    rules = args.rules.split(',') if args.rules else [args.rule]
    unknown = [r for r in rules if r not in RULES]
    if unknown:
        raise UsageError(f"unknown rules {unknown}")
    return [argparse.Namespace(**{**vars(args), 'batch': b, 'rule': r}) for r in rules for b in batches]


def cmd_compare(args) -> int:
    """One convergence table per run (``<engine>-<rule>-b<B>-w<W>-s<seed>.csv``) and ``summary.csv``."""
    train_set, test_set = load_dataset(args)
    out = Path(args.out)
    summary, finished = [], []
    for run_args in compare_runs(args):
        label = run_label(run_args)
        try:
            metrics = run_config(run_args, train_set, test_set)
        except DivergenceError as exc:
            logger.warning("%s diverged at iteration %d", label, exc.iteration)
            summary.append({'method': label, 'engine': run_args.engine, 'rule': run_args.rule,
                            'batch': run_args.batch, 'workers': run_args.workers or 1, 'samples': None,
                            'objective': 'diverged', 'test_error': None, 'samples_per_sec': None,
                            'time_to_target': None})
            continue
        write_metrics(metrics, out, label)
        finished.append(metrics)
        throughput = throughput_report([metrics], args.target)[0]
        summary.append({'method': label, 'engine': run_args.engine, 'rule': run_args.rule,
                        'batch': run_args.batch, 'workers': run_args.workers or 1, 'samples': metrics.samples,
                        'objective': metrics.final.objective, 'test_error': metrics.final.test_error,
                        'samples_per_sec': throughput['samples_per_sec'],
                        'time_to_target': throughput['time_to_target']})
    out.mkdir(parents=True, exist_ok=True)
    with (out / 'summary.csv').open('w') as stream:
        write_table(summary, stream)
    write_table(summary, sys.stdout)
    return EXIT_OK if finished else EXIT_DIVERGED


def cmd_verify_lemmas(args) -> int:
    report = run_lemma_suite(seed=args.seed, laws=args.laws, n_max=args.n_max, np_min=args.np_min,
                             trials=args.trials)
    write_table(report.rows(), sys.stdout)
    if not report.passed:
        failed = [c.name for c in report.checks if not c.passed]
        raise VerificationError(f"failed checks: {', '.join(failed)}")
    return EXIT_OK


def cmd_gen(args) -> int:
    p_law = PLaw(kind=args.p_law, low=args.p_low, high=args.p_high, exponent=args.p_exponent)
    data, _ = gen_synthetic(args.dim, args.n, p_law, noise=args.noise, seed=args.seed, task=args.task)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open('w') as stream:
        serialize_libsvm(data, stream)
    print(f"wrote {len(data)} examples of dim {data.dim} to {out}")
    return EXIT_OK


def _data_flags(parser):
    parser.add_argument('--data', default='tiny.libsvm',
                        help="libsvm file; relative names also resolve under $ADABATCH_DATA_DIR")
    parser.add_argument('--normalize', action='store_true', help="scale every example to unit norm")
    parser.add_argument('--test-split', type=float, default=0.2, help="held-out fraction (0 disables)")
    parser.add_argument('--split-seed', type=int, default=0)
    parser.add_argument('--out', default='.', help="output directory")


def _run_flags(parser):
    parser.add_argument('--loss', choices=[k.value for k in LossKind], default='logistic')
    parser.add_argument('--rule', choices=list(RULES), default='ab')
    parser.add_argument('--engine', choices=ENGINES, default='sgd')
    parser.add_argument('--gamma', type=float, default=0.1, help="step size (alpha for adagrad)")
    parser.add_argument('--batch', type=int, default=1)
    parser.add_argument('--workers', type=int, default=None)
    parser.add_argument('--budget', type=int, default=10000, help="training samples to process")
    parser.add_argument('--epochs-m', type=int, default=None, help="svrg inner iterations per anchor")
    parser.add_argument('--outer-epochs', type=int, default=10)
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--l2', type=float, default=0.0)
    parser.add_argument('--l2-metric', choices=list(L2_METRICS), default='id')
    parser.add_argument('--racy-writes', action='store_true', help="parallel engines skip atomic adds")
    parser.add_argument('--gap', action='store_true', help="compute F_* and report the training gap")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog='adabatch', description="Sparse-aware mini-batch SGD toolkit")
    parser.add_argument('--log-level', default=os.environ.get('ADABATCH_LOG_LEVEL', 'WARNING'))
    commands = parser.add_subparsers(dest='command', required=True, parser_class=Parser)

    cmd = commands.add_parser('train', help="run one configuration")
    _data_flags(cmd)
    _run_flags(cmd)
    cmd.set_defaults(func=cmd_train)

    cmd = commands.add_parser('grid', help="power-of-two step-size grid search")
    _data_flags(cmd)
    _run_flags(cmd)
    cmd.add_argument('--gamma-lo', type=float, default=2.0 ** -10)
    cmd.add_argument('--gamma-hi', type=float, default=2.0 ** 4)
    cmd.add_argument('--valid-split', type=float, default=0.2, help="fraction of the training part held for scoring")
    cmd.set_defaults(func=cmd_grid)

    cmd = commands.add_parser('compare', help="run several configurations and tabulate them")
    _data_flags(cmd)
    _run_flags(cmd)
    cmd.add_argument('--run', action='append', default=[], help="e.g. engine=sgd,rule=ab,batch=10")
    cmd.add_argument('--batches', help="comma-separated batch sizes to sweep")
    cmd.add_argument('--rules', help="comma-separated rules to sweep")
    cmd.add_argument('--target', type=float, default=None, help="test error for time-to-target")
    cmd.set_defaults(func=cmd_compare)

    cmd = commands.add_parser('verify-lemmas', help="exact and Monte Carlo moment checks")
    cmd.add_argument('--seed', type=int, default=0)
    cmd.add_argument('--laws', type=int, default=100)
    cmd.add_argument('--n-max', type=int, default=8)
    cmd.add_argument('--np-min', type=float, default=5.0)
    cmd.add_argument('--trials', type=int, default=0, help="Monte Carlo batches per point (0 skips)")
    cmd.set_defaults(func=cmd_verify_lemmas)

    cmd = commands.add_parser('gen', help="write a synthetic libsvm dataset")
    cmd.add_argument('--dim', type=int, default=50)
    cmd.add_argument('--n', type=int, default=5000)
    cmd.add_argument('--task', choices=('logistic', 'squared'), default='logistic')
    cmd.add_argument('--noise', type=float, default=0.0)
    cmd.add_argument('--p-law', choices=('uniform', 'power'), default='uniform')
    cmd.add_argument('--p-low', type=float, default=0.001)
    cmd.add_argument('--p-high', type=float, default=0.5)
    cmd.add_argument('--p-exponent', type=float, default=1.0)
    cmd.add_argument('--seed', type=int, default=0)
    cmd.add_argument('--out', required=True, help="output libsvm file")
    cmd.set_defaults(func=cmd_gen)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"adabatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=str(args.log_level).upper(), format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    setup_cache_from_env()
    try:
        return args.func(args)
    except (UsageError, ConfigError, ParseError, EmptyDatasetError) as exc:
        print(f"adabatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, GridDivergedError) as exc:
        print(f"adabatch: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except VerificationError as exc:
        print(f"adabatch: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION
    except AdaBatchError as exc:
        print(f"adabatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
