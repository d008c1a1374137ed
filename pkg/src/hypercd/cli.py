"""Command-line entry point.

Subcommands: ``synth``, ``pretrain``, ``train``, ``eval``, ``sweep``,
``flops`` and ``replay``. Every command except ``flops`` without ``--out``
writes its artifacts plus a ``manifest.json`` into ``--out``.

Settings resolve as: command-line flag, then the ``--config`` file (INI
sections ``[run]``, ``[arch]``, ``[pretrain]``, ``[finetune]``), then the
built-in defaults.

Seeds: one master ``--seed`` feeds ``derive_seed(master, *keys)``. Keys are
``("pretrain",)`` for pretraining, ``("split",)`` for the train/test
partitions, ``("run", r)`` for encoder/head initialization and batch order
of run ``r``, and ``("synth",)`` for synthetic data.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import platform
import shlex
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, cdnet, downstream, hsdata, selfsup
from . import tensorops as T

log = logging.getLogger("hypercd")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_INPUT = 3  # missing or malformed input file
EXIT_MISMATCH = 4  # checkpoint and data or architecture disagree
EXIT_DIVERGED = 5  # non-finite values during training
EXIT_IRREPRODUCIBLE = 6  # replay produced different artifact checksums


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE, hint: str = ""):
        super().__init__(message)
        self.code = code
        self.hint = hint


# ---------------------------------------------------------------------------
# settings
# ---------------------------------------------------------------------------


def _ints(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    if text is None or str(text).strip().lower() in ("none", "off", ""):
        return None
    return float(text)


# (dest, config section, config key, parser, default)
SETTINGS = [
    ("seed", "run", "seed", int, 0),
    ("deterministic", "run", "deterministic", _bool, False),
    ("backbone", "arch", "backbone", str, "modified"),
    ("n", "arch", "n", int, None),
    ("p", "pretrain", "p", int, 6),
    ("tau", "pretrain", "tau", float, 0.07),
    ("pretrain_iterations", "pretrain", "iterations", int, 200),
    ("pretrain_milestones", "pretrain", "milestones", _ints, (120, 160)),
    ("pretrain_lr", "pretrain", "lr", float, 0.03),
    ("reduction", "pretrain", "reduction", str, "queries"),
    ("init", "pretrain", "init", str, "residual"),
    ("pretrain_max_grad_norm", "pretrain", "max_grad_norm", _opt_float, 1.0),
    ("samples", "finetune", "samples", int, 200),
    ("runs", "finetune", "runs", int, 5),
    ("finetune_iterations", "finetune", "iterations", int, 100),
    ("finetune_milestones", "finetune", "milestones", _ints, (60, 80)),
    ("finetune_lr", "finetune", "lr", float, 0.03),
    ("lr_multiplier", "finetune", "lr_multiplier", float, 10.0),
    ("max_grad_norm", "finetune", "max_grad_norm", _opt_float, 1.0),
    ("augment", "finetune", "augment", _bool, True),
    ("momentum", "run", "momentum", float, 0.9),
    ("weight_decay", "run", "weight_decay", float, 0.005),
    ("gamma", "run", "gamma", float, 0.1),
]


def resolve_settings(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over defaults."""
    cfg = configparser.ConfigParser()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file {path} not found", EXIT_INPUT)
        try:
            cfg.read(path)
        except configparser.Error as exc:
            raise CliError(f"config file {path} does not parse: {exc}", EXIT_USAGE) from None
        known = {(sec, key) for _, sec, key, _, _ in SETTINGS}
        for sec in cfg.sections():
            for key in cfg[sec]:
                if (sec, key) not in known:
                    raise CliError(f"{path}: unknown setting [{sec}] {key}", EXIT_USAGE,
                                   "see the README for the list of config keys")
    out = {}
    for dest, sec, key, parse, default in SETTINGS:
        value = getattr(args, dest, None)
        try:
            if value is None and cfg.has_option(sec, key):
                value = parse(cfg.get(sec, key))
            elif value is not None:
                value = parse(value)
        except ValueError as exc:
            raise CliError(f"bad value for {dest}: {exc}", EXIT_USAGE) from None
        out[dest] = default if value is None else value
    return out


def regime_config(s: dict) -> downstream.RegimeConfig:
    try:
        arch = cdnet.backbone(s["backbone"], s["n"])
        ft = downstream.FinetuneConfig(
            iterations=s["finetune_iterations"], milestones=s["finetune_milestones"],
            lr_multiplier_domain_specific=s["lr_multiplier"], augment=s["augment"],
            train_per_domain=s["samples"], runs=s["runs"], base_lr=s["finetune_lr"],
            momentum=s["momentum"], weight_decay=s["weight_decay"], gamma=s["gamma"],
            max_grad_norm=s["max_grad_norm"])
        cc = selfsup.ContrastiveConfig(p=s["p"], tau=s["tau"], iterations=s["pretrain_iterations"],
                                       augment=s["augment"], reduction=s["reduction"], init=s["init"],
                                       max_grad_norm=s["pretrain_max_grad_norm"])
        sgd = T.SgdConfig(s["pretrain_lr"], s["momentum"], s["weight_decay"], s["gamma"],
                          s["pretrain_milestones"])
    except ValueError as exc:
        hint = ("shorter runs need matching --pretrain-milestones / --finetune-milestones"
                if "milestones" in str(exc) else "")
        raise CliError(f"invalid configuration: {exc}", EXIT_USAGE, hint) from None
    return downstream.RegimeConfig(arch, ft, cc, sgd, deterministic=s["deterministic"])


# ---------------------------------------------------------------------------
# manifests and artifacts
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)  # path -> sha256
    artifacts: dict = field(default_factory=dict)  # file name (relative to out) -> sha256
    timings: dict = field(default_factory=dict)  # stage -> seconds
    version: str = __version__
    python: str = platform.python_version()
    numpy: str = np.__version__

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        try:
            data = json.loads(Path(path).read_text())
            return cls(**data)
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise CliError(f"cannot read manifest {path}: {exc}", EXIT_INPUT) from None


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.ndarray, tuple)):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


class Session:
    """Collects inputs, artifacts and timings for one command."""

    def __init__(self, args, settings: dict):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(args.command, list(args.argv), dict(settings),
                                    {"master": settings.get("seed", 0)})
        self._t0 = time.perf_counter()

    def input(self, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise CliError(f"input file {path} not found", EXIT_INPUT,
                           "check the path; relative paths resolve against the working directory")
        self.manifest.inputs[str(path)] = sha256_file(path)
        return path

    def artifact(self, name: str) -> Path:
        return self.out / name

    def timed(self, stage: str, started: float):
        self.manifest.timings[stage] = round(time.perf_counter() - started, 3)

    def finish(self) -> Path:
        for path in sorted(self.out.iterdir()):
            if path.name != "manifest.json" and path.is_file():
                self.manifest.artifacts[path.name] = sha256_file(path)
        self.manifest.timings["total"] = round(time.perf_counter() - self._t0, 3)
        return self.manifest.write(self.out)


def load_prepared(session: Session, path) -> hsdata.HyperCube:
    path = session.input(path)
    try:
        return hsdata.prepare_cube(hsdata.load_cube(path))
    except hsdata.CubeFormatError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None


def save_params(params: cdnet.CdcnnParams, path: Path):
    T.save_checkpoint(path, cdnet.params_to_named(params))


def load_params(path) -> cdnet.CdcnnParams:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"checkpoint {path} not found", EXIT_INPUT,
                       "run `pretrain` or `train` first, or check the --out directory of that run")
    try:
        return cdnet.params_from_named(T.load_checkpoint(path))
    except T.CheckpointError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    except cdnet.ArchitectureError as exc:
        raise CliError(f"{path}: {exc}", EXIT_MISMATCH) from None


def write_metrics(path: Path, regime: str, reports: list, num_classes: int):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "regime", "oa", "aa"] + [f"class_{c + 1}" for c in range(num_classes)])
        for rep in reports:
            w.writerow([rep.run_index, regime, repr(rep.oa), repr(rep.aa)]
                       + ["" if np.isnan(v) else repr(float(v)) for v in rep.per_class])


def _summary(reports: list) -> dict:
    oa = np.array([r.oa for r in reports])
    aa = np.array([r.aa for r in reports])
    return {"mean_oa": float(oa.mean()), "std_oa": float(oa.std()),
            "mean_aa": float(aa.mean()), "std_aa": float(aa.std())}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, s: dict) -> int:
    bands, classes = _ints(args.bands), _ints(args.classes)
    if len(bands) != args.domains or len(classes) != args.domains:
        raise CliError(f"--bands and --classes need {args.domains} comma-separated values each "
                       f"(got {len(bands)} and {len(classes)})", EXIT_USAGE)
    session = Session(args, s)
    seed = int(downstream.derive_seed(s["seed"], "synth").generate_state(1, np.uint64)[0])
    session.manifest.seeds["synth"] = seed
    t0 = time.perf_counter()
    try:
        cubes = hsdata.synth_domains(args.domains, bands, classes, args.size, seed,
                                     noise=args.noise, tile=args.tile)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    for cube in cubes:
        hsdata.save_cube(cube, session.artifact(f"{cube.domain_id}.hsc"))
        print(session.artifact(f"{cube.domain_id}.hsc"))
    session.timed("synth", t0)
    session.finish()
    return EXIT_OK


def _pretrain(session: Session, sources, cfg: downstream.RegimeConfig, seed: int, tag="pretrain"):
    pre_ss = downstream.derive_seed(seed, "pretrain")
    t0 = time.perf_counter()
    result = selfsup.pretrain(sources, cfg.arch, cfg.contrastive, cfg.pretrain_sgd, pre_ss,
                              deterministic=cfg.deterministic)
    session.timed(tag, t0)
    return result


def cmd_pretrain(args, s: dict) -> int:
    session = Session(args, s)
    sources = [load_prepared(session, p) for p in args.sources]
    cfg = regime_config(s)
    result = _pretrain(session, sources, cfg, s["seed"])
    with open(session.artifact("pretrain_loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "lr", "loss"])
        for it, lr, loss in result.history:
            w.writerow([it, repr(lr), repr(loss)])
    save_params(result.params, session.artifact("pretrained.hcp"))
    first, last = result.history[0][2], result.history[-1][2]
    print(f"pretrained on {len(sources)} domains: loss {first:.4f} -> {last:.4f}")
    session.finish()
    return EXIT_OK


def _experiment(session: Session, regime: str, target, sources, cfg, seed: int,
                pretrained=None, prefix: str = ""):
    def on_run(r, params, rep):
        save_params(params, session.artifact(f"{prefix}{regime}_run{r}.hcp"))
    t0 = time.perf_counter()
    agg = downstream.run_experiment(regime, target, sources, cfg, runs=cfg.finetune.runs, seed=seed,
                                    pretrained=pretrained, on_run=on_run)
    session.timed(f"{prefix}{regime}", t0)
    return agg


def _check_regime_inputs(regime, sources, pretrained):
    if regime in ("cd_scratch", "sup_pretrain") and not sources:
        raise CliError(f"regime {regime} needs --sources", EXIT_USAGE)
    if regime == "self_sup" and pretrained is None and len(sources) < 2:
        raise CliError("self_sup needs --pretrained or at least two --sources", EXIT_USAGE)


def cmd_train(args, s: dict) -> int:
    session = Session(args, s)
    target = load_prepared(session, args.target)
    sources = [load_prepared(session, p) for p in args.sources or []]
    pretrained = None
    if args.pretrained:
        session.input(args.pretrained)
        pretrained = load_params(args.pretrained)
        if args.regime not in ("sup_pretrain", "self_sup"):
            raise CliError(f"--pretrained only applies to sup_pretrain and self_sup, not {args.regime}")
    _check_regime_inputs(args.regime, sources, pretrained)
    cfg = regime_config(s)
    if pretrained is not None:
        try:
            cdnet.check_trunk_compatible(pretrained.arch, cfg.arch)
        except cdnet.ArchitectureError as exc:
            raise CliError(str(exc), EXIT_MISMATCH, "pass the --backbone/--n used for pretraining") from None
    agg = _experiment(session, args.regime, target, sources, cfg, s["seed"], pretrained)
    session.manifest.seeds["splits"] = agg.seeds
    write_metrics(session.artifact("metrics.csv"), args.regime, agg.reports, target.num_classes)
    aggregate = {"regime": args.regime, "target": target.domain_id, "runs": len(agg.reports),
                 **_summary(agg.reports), "split_seeds": agg.seeds, "config": s}
    session.artifact("aggregate.json").write_text(json.dumps(aggregate, indent=2, sort_keys=True,
                                                             default=_jsonable) + "\n")
    print(f"{args.regime} on {target.domain_id}: OA {agg.mean_oa:.4f} AA {agg.mean_aa:.4f} "
          f"over {len(agg.reports)} runs")
    session.finish()
    return EXIT_OK


def cmd_eval(args, s: dict) -> int:
    session = Session(args, s)
    target = load_prepared(session, args.target)
    session.input(args.checkpoint)
    params = load_params(args.checkpoint)
    domain = args.domain or target.domain_id
    if domain not in params.encoders:
        if len(params.encoders) == 1 and args.domain is None:
            domain = next(iter(params.encoders))
        else:
            raise CliError(f"checkpoint has no encoder for domain {domain!r} "
                           f"(has {sorted(params.encoders)})", EXIT_MISMATCH, "pass --domain")
    if domain not in params.heads:
        raise CliError(f"checkpoint has no classification head for {domain!r}", EXIT_MISMATCH,
                       "evaluate a checkpoint written by `train`, not a pretrained one")
    if params.bands[domain] != target.bands:
        raise CliError(f"checkpoint encoder expects {params.bands[domain]} bands, "
                       f"{args.target} has {target.bands}", EXIT_MISMATCH,
                       "evaluate on the image the model was trained for")
    if params.num_classes(domain) != target.num_classes:
        raise CliError(f"checkpoint head has {params.num_classes(domain)} classes, "
                       f"{args.target} has {target.num_classes}", EXIT_MISMATCH)
    cube = hsdata.HyperCube(domain, target.data, target.labels, target.num_classes)
    if args.all_labeled:
        test_idx = cube.labeled_indices()
    else:
        _, test_idx, split_seed = downstream.split_for_run(cube, s["seed"], s["samples"], args.run)
        session.manifest.seeds["split"] = split_seed
    with T.compute_threads(s["deterministic"]):
        rep = downstream.evaluate(params, cube, test_idx, args.run)
    write_metrics(session.artifact("eval.csv"), "eval", [rep], cube.num_classes)
    report = {"checkpoint": str(args.checkpoint), "target": str(args.target), "run": args.run,
              "oa": rep.oa, "aa": rep.aa, "test_pixels": int(len(test_idx)),
              "confusion": rep.confusion.tolist()}
    session.artifact("eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"OA {rep.oa:.4f} AA {rep.aa:.4f} on {len(test_idx)} pixels")
    session.finish()
    return EXIT_OK


SWEEP_AXES = ("p", "samples", "n", "backbone")


def cmd_sweep(args, s: dict) -> int:
    session = Session(args, s)
    target = load_prepared(session, args.target)
    sources = [load_prepared(session, p) for p in args.sources or []]
    _check_regime_inputs(args.regime, sources, None)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise CliError("--values is empty", EXIT_USAGE)
    if args.axis != "backbone":
        try:
            values = [int(v) for v in values]
        except ValueError:
            raise CliError(f"axis {args.axis} takes integers, got {args.values!r}", EXIT_USAGE) from None
    shared_pre = None
    rows = []
    for v in values:
        sv = dict(s)
        sv[{"p": "p", "samples": "samples", "n": "n", "backbone": "backbone"}[args.axis]] = v
        cfg = regime_config(sv)
        pre = None
        # only the finetuning stage depends on the sample count
        if args.axis == "samples" and args.regime == "self_sup":
            if shared_pre is None:
                shared_pre = _pretrain(session, sources, cfg, s["seed"]).params
            pre = shared_pre
        agg = _experiment(session, args.regime, target, sources, cfg, s["seed"], pre, prefix=f"{args.axis}{v}_")
        summary = _summary(agg.reports)
        rows.append([v, args.regime, summary["mean_oa"], summary["std_oa"], summary["mean_aa"],
                     summary["std_aa"]] + [r.oa for r in agg.reports])
        print(f"{args.axis}={v}: OA {summary['mean_oa']:.4f} AA {summary['mean_aa']:.4f}")
    with open(session.artifact("sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([args.axis, "regime", "mean_oa", "std_oa", "mean_aa", "std_aa"]
                   + [f"oa_run{r}" for r in range(s["runs"])])
        for row in rows:
            w.writerow([row[0], row[1]] + [f"{x:.6f}" for x in row[2:]])
    print(format_table([args.axis, "OA", "AA"], [[r[0], f"{100 * r[2]:.2f}", f"{100 * r[4]:.2f}"] for r in rows]))
    session.finish()
    return EXIT_OK


def format_table(header, rows) -> str:
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(wd) for c, wd in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(lines)


def cmd_flops(args, s: dict) -> int:
    arch = cdnet.backbone(s["backbone"], s["n"])
    if args.image:
        path = Path(args.image)
        if not path.is_file():
            raise CliError(f"image {path} not found", EXIT_INPUT)
        try:
            h, w, b, c, _ = hsdata.read_header(path)
        except hsdata.CubeFormatError as exc:
            raise CliError(str(exc), EXIT_INPUT) from None
        name = path.stem
    elif args.dims:
        dims = _ints(args.dims)
        if len(dims) != 4:
            raise CliError("--dims takes H,W,B,C", EXIT_USAGE)
        h, w, b, c = dims
        name = "image"
    else:
        raise CliError("flops needs --image or --dims", EXIT_USAGE)
    table = cdnet.flops_table(arch, hsdata.DomainSpec(name, b, c), h, w)
    total = sum(f for _, f in table)
    print(format_table(["layer", "FLOPs"], [[n, f"{f / 1e9:.4f}e9"] for n, f in table]
                       + [["total", f"{total / 1e9:.4f}e9"]]))
    if args.out:
        session = Session(args, s)
        if args.image:
            session.input(args.image)
        with open(session.artifact("flops.csv"), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["layer", "flops"])
            wr.writerows(table)
            wr.writerow(["total", total])
        session.finish()
    return EXIT_OK


def cmd_replay(args, s: dict) -> int:
    """Re-run a recorded command into a new directory and compare artifact checksums."""
    manifest = RunManifest.read(args.manifest)
    argv = list(manifest.argv)
    if "--out" in argv:
        argv[argv.index("--out") + 1] = str(args.out)
    else:
        argv += ["--out", str(args.out)]
    if "--deterministic" not in argv:
        argv.append("--deterministic")
    code = main(argv)
    if code != EXIT_OK:
        return code
    fresh = RunManifest.read(Path(args.out) / "manifest.json")
    diff = sorted(k for k in set(manifest.artifacts) | set(fresh.artifacts)
                  if manifest.artifacts.get(k) != fresh.artifacts.get(k))
    if diff:
        print("artifacts differ: " + ", ".join(diff), file=sys.stderr)
        return EXIT_IRREPRODUCIBLE
    print(f"replayed {manifest.command}: {len(fresh.artifacts)} artifacts identical")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--seed", type=int, help="64-bit master seed (default 0)")
    p.add_argument("--deterministic", action="store_const", const=True, default=None,
                   help="single-threaded numerics for bit-identical reruns")
    p.add_argument("--config", help="INI file with [run] [arch] [pretrain] [finetune] sections")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")


def _model_flags(p: argparse.ArgumentParser):
    p.add_argument("--backbone", choices=cdnet.BACKBONES)
    p.add_argument("--n", type=int, help="number of residual modules")
    p.add_argument("--p", type=int, help="region side for pseudo-labels")
    p.add_argument("--tau", type=float, help="contrastive temperature")
    p.add_argument("--pretrain-iterations", type=int)
    p.add_argument("--pretrain-milestones", help="comma-separated lr decay iterations (default 120,160)")
    p.add_argument("--samples", type=int, help="training samples per target image")
    p.add_argument("--runs", type=int)
    p.add_argument("--finetune-iterations", type=int)
    p.add_argument("--finetune-milestones", help="comma-separated lr decay iterations (default 60,80)")
    p.add_argument("--lr-multiplier", type=float, help="lr factor for encoder and head when finetuning")
    p.add_argument("--max-grad-norm", type=_opt_float, help="gradient norm cap for supervised training")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hypercd", description="Cross-domain hyperspectral representation learning")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic HSC1 cubes")
    _common(p)
    p.add_argument("--domains", type=int, required=True)
    p.add_argument("--bands", required=True, help="comma-separated band count per domain")
    p.add_argument("--classes", required=True, help="comma-separated class count per domain")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--tile", type=int, help="side of single-class blocks (default size/8)")

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _common(p)
    _model_flags(p)
    p.add_argument("--sources", nargs="+", required=True, help="HSC1 cubes (labels ignored)")

    p = sub.add_parser("train", help="train and evaluate one regime over several runs")
    _common(p)
    _model_flags(p)
    p.add_argument("--regime", choices=downstream.REGIMES, required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--sources", nargs="*")
    p.add_argument("--pretrained", help="checkpoint from `pretrain` (skips pretraining)")

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    _common(p)
    p.add_argument("--samples", type=int, help="training-set size used for the split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--domain", help="domain id inside the checkpoint (default: target file stem)")
    p.add_argument("--run", type=int, default=0, help="run index whose test split to use")
    p.add_argument("--all-labeled", action="store_true", help="evaluate on every labeled pixel")

    p = sub.add_parser("sweep", help="OA/AA table over one axis")
    _common(p)
    _model_flags(p)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--regime", choices=downstream.REGIMES, default="self_sup")
    p.add_argument("--target", required=True)
    p.add_argument("--sources", nargs="*")

    p = sub.add_parser("flops", help="layer-by-layer FLOPs")
    _common(p, out_required=False)
    p.add_argument("--arch", dest="backbone", choices=cdnet.BACKBONES)
    p.add_argument("--n", type=int)
    p.add_argument("--image", help="HSC1 cube whose header gives H, W, B, C")
    p.add_argument("--dims", help="H,W,B,C instead of --image")

    p = sub.add_parser("replay", help="re-run a manifest and compare artifact checksums")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "flops": cmd_flops, "replay": cmd_replay}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    args.argv = argv
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        settings = resolve_settings(args) if args.command != "replay" else {}
        log.info("command line: %s", shlex.join(argv))
        return COMMANDS[args.command](args, settings)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.hint:
            print(f"hint: {exc.hint}", file=sys.stderr)
        return exc.code
    except T.NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("hint: lower the learning rate or keep --max-grad-norm enabled", file=sys.stderr)
        return EXIT_DIVERGED
    except cdnet.ArchitectureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (hsdata.CubeFormatError, T.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
