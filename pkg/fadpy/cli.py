from __future__ import annotations

import argparse
from contextlib import ContextDecorator, ExitStack
from dataclasses import replace
from importlib import metadata
import logging
from pathlib import Path
import sys
from typing import (
    Any,
    Callable,
    Dict,
    Final,
    Iterable,
    List,
    Optional,
    Sequence,
)

from prompt_toolkit.shortcuts import prompt
from tabulate import tabulate

from fadpy.checkpoint import load_checkpoint, restore, save_checkpoint
from fadpy.classification import (
    ClassificationNet,
    classification_mode_search,
    classification_search,
    DecouplingStudy,
    expected_shared_fraction,
    generate_classification_dataset,
)
from fadpy.config import apply_overrides, load_config, RunConfig
from fadpy.data import scale_octaves, SyntheticScene
from fadpy.derived import build_derived_network
from fadpy.detection import search_detection, split_eval, train_derived
from fadpy.errors import (
    CheckpointError,
    ConfigError,
    GenotypeError,
    NumericalError,
    ShapeError,
)
from fadpy.file_scenes import FileSceneRepo
from fadpy.genotype import (
    count_discrete_paths,
    derive_genotype,
    Genotype,
    genotype_to_dict,
    parse_genotype,
    random_genotype,
    REPORTED_PATH_COUNT,
    serialize_genotype,
)
from fadpy.oracle import (
    broken_relu_gradient,
    EQUIVALENCE_TOLERANCE,
    Fault,
    MODULE_EQUIVALENCE_TOLERANCE,
    path_count_check,
    PathCountReport,
    perturb_unshared_weight,
    run_verification,
    VerifyReport,
)
from fadpy.search import MetricsLog, SearchResult
from fadpy.search_space import is_none, space_candidates
from fadpy.supernet import (
    baseline_head_parameters,
    build_supernet,
    CellTopology,
    group_candidates,
    NUM_GROUPS,
    SearchableModule,
)
from fadpy.utils import canonical_json, derive_rng


logger = logging.getLogger(__name__)


# Constants
PROGRAM_NAME: Final[str] = "fadpy"
EXIT_OK: Final[int] = 0
EXIT_VIOLATION: Final[int] = 1
EXIT_USAGE: Final[int] = 2
EXIT_NUMERICAL: Final[int] = 3

GENOTYPE_NAME: Final[str] = "genotype.json"
METRICS_NAME: Final[str] = "metrics.jsonl"
TRAIN_METRICS_NAME: Final[str] = "train_metrics.jsonl"
CHECKPOINT_DIR: Final[str] = "checkpoint"
SCENES_DIR_NAME: Final[str] = "scenes"
ABLATION_NAME: Final[str] = "ablation.json"

LOG_FORMAT: Final[str] = "%(levelname)s %(name)s: %(message)s"

REPORTED_PATH_TEXT: Final[str] = "2.3e13"


def program_version() -> str:
    try:
        return metadata.version(PROGRAM_NAME)
    except metadata.PackageNotFoundError:
        return "unknown"


# ===========
# Terminal UI
# ===========


class cli_window(ContextDecorator):

    def __init__(
            self,
            header: str,
            fillchar: str = "=",
            wing_size: int = 5,
    ) -> None:
        self.header = header
        self.fillchar = fillchar
        self.wing_size = wing_size
        self.width = len(header) + 2 * (wing_size + 1)  # +1 is for space

    def __enter__(self):
        wing = self.fillchar * self.wing_size
        print(f"{wing} {self.header} {wing}")
        return self

    def __exit__(self, *exc):
        print(self.fillchar * self.width)
        return False


def ask_ok(
        prompt_message: str,
        *,
        default: Optional[bool] = True,
) -> bool:
    """Yes/No input.

    Can raise EOFError
    """

    while True:
        try:
            input_ = prompt(prompt_message).lower()
        except KeyboardInterrupt:
            continue

        if not input_:
            if default is not None:
                return default
            else:
                continue
        if "yes".startswith(input_):
            return True
        if "no".startswith(input_):
            return False


def confirm_overwrite(paths: Iterable[Path], force: bool) -> bool:
    """Ask before replacing existing artifacts; never asks without a terminal."""
    existing = [path for path in paths if path.exists()]
    if not existing or force or not sys.stdin.isatty():
        return True
    names = ", ".join(str(path) for path in existing)
    try:
        return ask_ok(f"Overwrite {names}? [y/N] ", default=False)
    except EOFError:
        return False


# =======
# Reports
# =======


def genotype_table(genotype: Genotype) -> str:
    rows = [
        (group, node, choice.pred, choice.op.value)
        for group, gene in enumerate(genotype.groups)
        for node, choices in enumerate(gene, start=1)
        for choice in choices
    ]
    return tabulate(
        rows,
        headers=("Group", "Node", "From", "Operation"),
        colalign=("center", "center", "center", "left"),
    )


def search_table(result: SearchResult) -> str:
    state = result.state
    return tabulate(
        [
            ("iterations", state.iteration),
            ("derivations", len(state.history)),
            ("stable", "yes" if result.stable else "no"),
            ("final L_train", f"{state.train_loss:.4f}"),
            ("final L_val", f"{state.val_loss:.4f}"),
        ],
        tablefmt="plain",
    )


def ok(condition: bool) -> str:
    return "ok" if condition else "FAILED"


def path_count_label(count: PathCountReport) -> str:
    return f"paths ({count.nodes} nodes, {count.candidates} candidates)"


def verify_table(report: VerifyReport) -> str:
    grad = report.grad_check
    worst = grad.worst
    executed = {
        name: counts["representations"]
        for name, counts in report.executions.items()
    }
    block_diff = report.block_equivalence.max_diff
    rows = [
        ("conv executions (shared)", executed["shared"], report.shared_representations,
         ok(executed["shared"] == report.shared_representations)),
        ("conv executions (unshared)", executed["unshared"],
         report.unshared_representations,
         ok(executed["unshared"] == report.unshared_representations)),
        ("adapters (decoupled)", report.executions["decoupled"]["adapters"], "-", "-"),
        ("block max |diff|", f"{block_diff:.2e}", f"< {EQUIVALENCE_TOLERANCE:.0e}",
         ok(block_diff < EQUIVALENCE_TOLERANCE)),
        ("module max |diff|", f"{report.module_diff:.2e}",
         f"< {MODULE_EQUIVALENCE_TOLERANCE:.0e}",
         ok(report.module_diff < MODULE_EQUIVALENCE_TOLERANCE)),
        (f"worst FD rel. error ({len(grad.probes)} probes)", f"{grad.worst_rel_err:.2e}",
         f"< {grad.tolerance:.0e}", ok(grad.passed)),
        ("worst probe", "-" if worst is None else f"{worst.name}{list(worst.index)}",
         "-", "-"),
        (path_count_label(report.path_count),
         f"closed form {report.path_count.closed_form:,}",
         f"enumeration {report.path_count.enumerated:,}",
         ok(report.path_count.agrees)),
    ]
    return tabulate(rows, headers=("Check", "Value", "Expected", "Status"))


def parameter_table(net: SearchableModule, c: int) -> str:
    module = net.num_module_parameters()
    baseline = baseline_head_parameters(c)
    return tabulate(
        [
            ("network", net.num_parameters()),
            ("searchable module", module),
            ("8-conv head baseline", baseline),
            ("module / baseline", f"{module / baseline:.3f}"),
        ],
        headers=("Parameters", "Count"),
        colalign=("left", "right"),
    )


def ablation_table(study: DecouplingStudy) -> str:
    rows = [
        (
            "yes" if decouple else "no",
            len(study.fractions[decouple]),
            f"{study.mean_fraction(decouple):.3f}",
            " ".join(f"{f:.2f}" for f in study.fractions[decouple]),
            f"{sum(study.accuracies[decouple]) / len(study.accuracies[decouple]):.3f}",
        )
        for decouple in (True, False)
    ]
    return tabulate(
        rows,
        headers=("Decoupled", "Searches", "Shared trans.", "Per search", "Accuracy"),
        colalign=("center", "center", "right", "left", "right"),
    )


# ===========
# Subcommands
# ===========


Handler = Callable[[argparse.Namespace, RunConfig], int]


def load_scenes(config: RunConfig) -> List[SyntheticScene]:
    """Search and evaluation scenes, cached under the output directory."""
    data = config.data
    repo = FileSceneRepo(config.output_dir / SCENES_DIR_NAME)
    return repo.get_or_generate(config.seed, data.num_scenes + data.eval_scenes, data)


def cmd_search(args: argparse.Namespace, config: RunConfig) -> int:
    out = config.output_dir
    if not confirm_overwrite([out / GENOTYPE_NAME, out / METRICS_NAME], args.force):
        print("Nothing written.")
        return EXIT_OK
    net: Any
    with MetricsLog(out / METRICS_NAME) as metrics:
        metrics.write_header({
            "command": "search",
            "version": program_version(),
            "task": config.task,
            "seed": config.seed,
            "decouple": config.supernet.decouple,
            "config": config.to_dict(),
        })
        if config.task == "classify":
            run = classification_search(
                config.supernet, config.schedule, config.classification,
                config.seed, metrics,
            )
            result, net = run.result, run.net
            metrics.write({"eval": {"accuracy": run.accuracy}})
        else:
            search_scenes, _ = split_eval(load_scenes(config), config.data)
            result, net = search_detection(
                config.supernet, config.schedule, search_scenes, config.data,
                config.seed, metrics,
            )
    (out / GENOTYPE_NAME).write_text(
        serialize_genotype(result.genotype), encoding="utf-8"
    )
    save_checkpoint(out / CHECKPOINT_DIR, net.param_store(), {
        "seed": config.seed,
        "iteration": result.state.iteration,
        "data_rng_state": result.state.rng_state,
        "config": config.to_dict(),
    })
    print(search_table(result))
    print()
    print(genotype_table(result.genotype))
    return EXIT_OK


def cmd_derive(args: argparse.Namespace, config: RunConfig) -> int:
    directory = args.checkpoint or config.output_dir / CHECKPOINT_DIR
    checkpoint = load_checkpoint(directory)
    rng = derive_rng(config.seed, "weights")
    net: Any = (
        ClassificationNet(config.supernet, rng)
        if config.task == "classify" else
        build_supernet(config.supernet, rng)
    )
    restore(net.param_store(), checkpoint)
    genotype = derive_genotype(net.alphas)
    target = args.genotype or config.output_dir / GENOTYPE_NAME
    if not confirm_overwrite([target], args.force):
        print("Nothing written.")
        return EXIT_OK
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(serialize_genotype(genotype), encoding="utf-8")
    print(genotype_table(genotype))
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    if config.task != "detect":
        raise ConfigError("task: derived networks are trained for the 'detect' task only")
    supernet = config.supernet
    if args.random:
        genotype = random_genotype(
            derive_rng(config.seed, "sampling"),
            group_candidates(supernet),
            CellTopology(supernet.num_nodes),
        )
        source = "random"
    else:
        path = args.genotype or config.output_dir / GENOTYPE_NAME
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise FileNotFoundError(f"genotype file '{path}' does not exist") from None
        genotype = parse_genotype(text, group_candidates(supernet))
        source = str(path)

    out = config.output_dir
    if not confirm_overwrite([out / TRAIN_METRICS_NAME], args.force):
        print("Nothing written.")
        return EXIT_OK
    net = build_derived_network(genotype, supernet, derive_rng(config.seed, "weights"))
    train_scenes, eval_scenes = split_eval(load_scenes(config), config.data)
    with MetricsLog(out / TRAIN_METRICS_NAME) as metrics:
        metrics.write_header({
            "command": "train",
            "version": program_version(),
            "seed": config.seed,
            "genotype_source": source,
            "genotype": genotype_to_dict(genotype),
            "config": config.to_dict(),
        })
        result = train_derived(
            net, train_scenes, eval_scenes, config.schedule, config.data,
            derive_rng(config.seed, "data"), metrics,
        )
    print(genotype_table(genotype))
    print()
    print(parameter_table(net, supernet.c))
    print()
    print(tabulate(
        [("iterations", result.iterations),
         ("final loss", "-" if result.final_loss is None else f"{result.final_loss:.4f}"),
         ("toy AP@0.5", f"{result.ap:.4f}")],
        tablefmt="plain",
    ))
    return EXIT_OK


INJECTIONS: Final[Dict[str, str]] = {
    "weight": "perturb one unshared conv weight after tying",
    "relu": "drop the ReLU mask from the backward pass",
}


def cmd_verify(args: argparse.Namespace, config: RunConfig) -> int:
    supernet = replace(config.supernet, task="detect")
    fault: Optional[Fault] = perturb_unshared_weight if args.inject == "weight" else None
    with ExitStack() as stack:
        if args.inject == "relu":
            stack.enter_context(broken_relu_gradient())
        report = run_verification(
            supernet, config.seed, trials=args.trials, probes=args.probes, fault=fault
        )
    with cli_window("Verification"):
        print(
            f"representations shared={report.shared_representations}"
            f" unshared={report.unshared_representations}"
        )
        print(verify_table(report))
    if not report.passed:
        for violation in report.violations:
            logger.error("tolerance violated: %s", violation)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_count(args: argparse.Namespace, config: RunConfig) -> int:
    topology = CellTopology(config.supernet.num_nodes)
    candidates = space_candidates(config.supernet.space)
    usable = sum(not is_none(op) for op in candidates)
    per_group = count_discrete_paths(topology, 1, usable)
    total = count_discrete_paths(topology, NUM_GROUPS, usable)
    rows = [
        ("search space", config.supernet.space),
        ("candidates per edge", len(candidates)),
        ("intermediate nodes per cell", topology.num_nodes),
        ("paths per group", f"{per_group:,}"),
        (f"paths per module ({NUM_GROUPS} groups)", f"{total:,}"),
    ]
    mismatch = False
    if args.enumerate:
        check = path_count_check()
        mismatch = not check.agrees
        rows.append((
            f"reduced {path_count_label(check)}",
            f"closed form {check.closed_form:,}, enumeration {check.enumerated:,}",
        ))
    print(tabulate(rows, tablefmt="plain"))
    print()
    print(f"paper reports ~{REPORTED_PATH_TEXT} unique paths.")
    print(
        f"Note: this topology derives {total:.2e} genotypes,"
        f" {REPORTED_PATH_COUNT / total:.0f}x fewer than the reported figure,"
        " which evidently counts a larger combination space; the two are not"
        " expected to agree."
    )
    if mismatch:
        logger.error("closed-form count differs from enumeration")
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_gen_data(args: argparse.Namespace, config: RunConfig) -> int:
    if config.task == "classify":
        data = config.classification
        images = generate_classification_dataset(config.seed, data.num_images, data)
        counts = [(label, int((images.labels == label).sum()))
                  for label in range(data.num_classes)]
        print(tabulate(counts, headers=("Class", "Images"), colalign=("center", "right")))
        return EXIT_OK
    scenes = load_scenes(config)
    print(f"{len(scenes)} scenes in {config.output_dir / SCENES_DIR_NAME}")
    histogram = scale_octaves(scenes)
    print(tabulate(
        [(f"{2 ** octave}-{2 ** (octave + 1) - 1}", histogram[octave])
         for octave in sorted(histogram)],
        headers=("Scale (px)", "Objects"),
        colalign=("left", "right"),
    ))
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    config = replace(config, task="classify")
    out = config.output_dir
    if not confirm_overwrite([out / ABLATION_NAME], args.force):
        print("Nothing written.")
        return EXIT_OK
    study = classification_mode_search(
        config.supernet, config.schedule, config.classification, config.seed,
        searches=args.searches,
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / ABLATION_NAME).write_text(canonical_json({
        "seed": config.seed,
        "fractions": {str(k).lower(): v for k, v in study.fractions.items()},
        "accuracies": {str(k).lower(): v for k, v in study.accuracies.items()},
        "genotypes": {
            str(k).lower(): [genotype_to_dict(g) for g in v]
            for k, v in study.genotypes.items()
        },
    }), encoding="utf-8")
    print(ablation_table(study))
    normal_candidates = group_candidates(config.supernet)[0]
    print(f"\nexpected fraction at initialization: "
          f"{expected_shared_fraction(normal_candidates):.3f}")
    helps = "yes" if study.decoupling_helps else "no"
    print(f"decoupling raises the shared fraction: {helps}")
    return EXIT_OK


# ======
# Parser
# ======


def build_parser() -> argparse.ArgumentParser:
    defaults = RunConfig()
    supernet, schedule = defaults.supernet, defaults.schedule

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, metavar="FILE",
                        help="JSON run configuration (default: built-in defaults)")
    common.add_argument("--task", dest="task", choices=("detect", "classify"),
                        help=f"task (default: {defaults.task})")
    common.add_argument("--seed", type=int, help=f"run seed (default: {defaults.seed})")
    common.add_argument("--output-dir", dest="output_dir", type=Path, metavar="DIR",
                        help=f"artifact directory (default: {defaults.output_dir})")
    common.add_argument("--M", dest="supernet.M", type=int,
                        help=f"cells per group (default: {supernet.M})")
    common.add_argument("--c", dest="supernet.c", type=int,
                        help=f"node channels (default: {supernet.c})")
    common.add_argument("--c-prime", dest="supernet.c_prime", type=int,
                        help="transformation block channels"
                        f" (default: {supernet.c_prime})")
    common.add_argument("--decouple", dest="supernet.decouple",
                        action=argparse.BooleanOptionalAction,
                        help=f"decoupling adapters (default: {supernet.decouple})")
    common.add_argument("--space", dest="supernet.space",
                        help=f"search space (default: {supernet.space})")
    common.add_argument("--total-iters", dest="schedule.total_iters", type=int,
                        help=f"search iterations (default: {schedule.total_iters})")
    common.add_argument("--derive-every", dest="schedule.derive_every", type=int,
                        help=f"derivation interval (default: {schedule.derive_every})")
    common.add_argument("--train-iters", dest="schedule.train_iters", type=int,
                        help=f"training iterations (default: {schedule.train_iters})")
    common.add_argument("--force", action="store_true",
                        help="overwrite existing artifacts without asking")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog=PROGRAM_NAME,
        description="Differentiable search of one-stage detector heads.",
    )
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {program_version()}")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, handler: Handler, help_: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(
            name, parents=[common], help=help_, description=help_,
        )
        sub.set_defaults(handler=handler)
        return sub

    add("search", cmd_search,
        "search a genotype and write genotype.json, metrics, checkpoint")

    derive = add("derive", cmd_derive,
                 "derive a genotype from a saved supernet checkpoint")
    derive.add_argument("--checkpoint", type=Path, metavar="DIR",
                        help="checkpoint directory (default: OUTPUT_DIR/checkpoint)")
    derive.add_argument("--genotype", type=Path, metavar="FILE",
                        help="output file (default: OUTPUT_DIR/genotype.json)")

    train = add("train", cmd_train, "train a discrete network and report its toy AP")
    group = train.add_mutually_exclusive_group()
    group.add_argument("--genotype", type=Path, metavar="FILE",
                       help="genotype file (default: OUTPUT_DIR/genotype.json)")
    group.add_argument("--random", action="store_true",
                       help="train a random genotype drawn from the seed")

    verify = add("verify", cmd_verify, "check sharing equivalence, counts and gradients")
    verify.add_argument("--trials", type=int, default=100,
                        help="random equivalence inputs (default: 100)")
    verify.add_argument("--probes", type=int, default=50,
                        help="finite-difference probes (default: 50)")
    verify.add_argument("--inject", choices=sorted(INJECTIONS),
                        help="inject a fault for testing the checks: " + "; ".join(
                            f"{k}: {v}" for k, v in sorted(INJECTIONS.items())))

    count = add("count", cmd_count, "count the discrete paths of the search space")
    count.add_argument("--enumerate", action="store_true",
                       help="also check the closed form by enumerating a reduced space")

    add("gen-data", cmd_gen_data, "generate and cache the synthetic dataset")

    ablate = add("ablate", cmd_ablate, "decoupling study on the classification task")
    ablate.add_argument("--searches", type=int, default=4,
                        help="searches per setting (default: 4)")
    return parser


OVERRIDE_KEYS: Final[Sequence[str]] = (
    "task",
    "seed",
    "output_dir",
    "supernet.M",
    "supernet.c",
    "supernet.c_prime",
    "supernet.decouple",
    "supernet.space",
    "schedule.total_iters",
    "schedule.derive_every",
    "schedule.train_iters",
)


def build_config(args: argparse.Namespace) -> RunConfig:
    options = vars(args)
    config = load_config(args.config)
    return apply_overrides(config, {key: options.get(key) for key in OVERRIDE_KEYS})


def configure_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose or sys.flags.dev_mode else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


# ===
# Run
# ===


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        config = build_config(args)
        return args.handler(args, config)
    except NumericalError as err:
        logger.error("numerical failure: %s", err)
        return EXIT_NUMERICAL
    except (ConfigError, GenotypeError, CheckpointError, ShapeError,
            FileNotFoundError) as err:
        print(f"{PROGRAM_NAME}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
