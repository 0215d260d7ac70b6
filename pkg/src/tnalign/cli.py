"""``tnalign`` command line: lmc, rebasin, fed, theory and data subcommands.

Every run reads one JSON config with the sections model, data, train, mask,
lmc, fed and theory (all optional, unknown keys rejected). Outputs go to
``--out``; each artifact carries the config hash and tool version, and
``manifest.json`` lists them with their SHA-256 plus the (only) timestamp.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from . import __version__
from .connect import barrier_report, sweep
from .data import (CACHE_ENV, fetch, gen_blobs, gen_polynomial, inspect_file, load_cifar10,
                   load_image_dataset, normalize)
from .errors import (ConfigError, DataError, DegenerateError, NumericError, TnalignError)
from .fedsim import FederatedConfig, run_federated
from .mask import prune_at_init, sample_mask
from .nncore import (Dataset, NetworkSpec, OptimizerState, build_network, load_checkpoint,
                     save_checkpoint, train)
from .perm import apply_permutation, simulated_annealing_match, weight_match
from .theory import TheoryConfig, bound_check

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SETS = ("mnist", "fashion_mnist")


# ---------------------------------------------------------------- config


@dataclass
class ModelSection:
    layer_widths: list = field(default_factory=lambda: [1, 200, 1])
    seed: int = 0
    activation: str = "relu"
    output_head: Optional[str] = None  # None: picked from the data kind


@dataclass
class DataSection:
    name: str = "poly2"
    n: int = 100
    noise_std: float = 0.05
    seed: int = 0
    n_classes: int = 3
    n_per_class: int = 100
    dim: int = 2
    separation: float = 3.0
    normalize: Optional[str] = None
    eval_split: Optional[str] = None  # None: "test" for image sets, else "train"
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    root: Optional[str] = None


@dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 10
    lr: float = 0.05
    momentum: float = 0.0
    weight_decay: float = 0.0
    shuffle_seeds: list = field(default_factory=lambda: [1, 2])


@dataclass
class MaskSection:
    mode: str = "none"  # none | tna_pfn | prune
    ratio: float = 0.4
    seed: int = 0


@dataclass
class LmcSection:
    grid_size: int = 25
    checkpoints: Optional[list] = None
    from_run: Optional[str] = None
    wm: bool = True
    wm_max_sweeps: int = 100
    wm_seed: int = 0
    sa_iters: int = 0
    sa_t0: float = 1.0
    sa_decay: float = 0.95
    sa_seed: int = 0
    sa_eval_size: int = 1000


@dataclass
class TheorySection:
    h: int = 512
    d: int = 32
    b: float = 1.0
    sigma_v: float = 1.0
    sigma_U: float = 1.0
    rho_v: float = 0.4
    rho_U: float = 0.4
    delta: float = 0.1
    n_x: int = 4096
    alpha_grid_size: int = 25
    trials: int = 200
    base_seed: int = 0
    trend_trials: int = 50


SECTIONS = {
    "model": ModelSection,
    "data": DataSection,
    "train": TrainSection,
    "mask": MaskSection,
    "lmc": LmcSection,
    "fed": FederatedConfig,
    "theory": TheorySection,
}


def _check_type(section, name, value, default):
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{section}.{name}: expected {type(default).__name__}, "
                          f"got {type(value).__name__}")


def _parse_section(name, cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    defaults = asdict(cls())
    for k, v in raw.items():
        _check_type(name, k, v, defaults[k])
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    mask: MaskSection = field(default_factory=MaskSection)
    lmc: LmcSection = field(default_factory=LmcSection)
    fed: FederatedConfig = field(default_factory=FederatedConfig)
    theory: TheorySection = field(default_factory=TheorySection)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}")
        cfg = cls(**{k: _parse_section(k, SECTIONS[k], v) for k, v in raw.items()})
        cfg.validate()
        return cfg

    def validate(self):
        if self.mask.mode not in ("none", "tna_pfn", "prune"):
            raise ConfigError(f"mask.mode must be none, tna_pfn or prune, got {self.mask.mode!r}")
        if not 0.0 <= self.mask.ratio <= 1.0:
            raise ConfigError("mask.ratio must lie in [0, 1]")
        if len(self.train.shuffle_seeds) != 2:
            raise ConfigError("train.shuffle_seeds needs exactly two seeds")
        if self.data.eval_split not in (None, "train", "test"):
            raise ConfigError("data.eval_split must be train or test")
        if self.data.normalize not in (None, "standardize"):
            raise ConfigError("data.normalize must be null or standardize")
        if self.lmc.checkpoints is not None and len(self.lmc.checkpoints) != 2:
            raise ConfigError("lmc.checkpoints needs exactly two paths")
        TheoryConfig(**_theory_fields(self.theory))

    def effective(self) -> dict:
        """Resolved config with equivalent settings collapsed, e.g. a zero-ratio
        mask is the vanilla path, so both hash (and write) identically."""
        d = asdict(self)
        m = d["mask"]
        if m["mode"] == "tna_pfn" and m["ratio"] == 0.0:
            m["mode"] = "none"
        if m["mode"] == "none":
            m["ratio"], m["seed"] = 0.0, 0
        f = d["fed"]
        if f["method"] == "fedpfn" and f["rho"] == 0.0:
            f["method"] = "fedavg"
        if f["method"] == "fedavg":
            f["rho"], f["mask_seed"] = 0.0, 0
        return d

    def config_hash(self) -> str:
        text = json.dumps(self.effective(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _theory_fields(t: TheorySection) -> dict:
    names = {f.name for f in dataclasses.fields(TheoryConfig)}
    return {k: v for k, v in asdict(t).items() if k in names}


def apply_seed_overrides(raw: dict, overrides) -> dict:
    """``section.key=JSON`` pairs; only keys naming a seed may be overridden."""
    raw = json.loads(json.dumps(raw))
    for item in overrides or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or "seed" not in name:
            raise ConfigError(f"--seed-override expects section.<seed key>=VALUE, got {item!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--seed-override value for {key} is not JSON: {value!r}") from exc
        raw.setdefault(section, {})[name] = parsed
    return raw


def load_config(path, overrides=None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(apply_seed_overrides(raw, overrides))


# ---------------------------------------------------------------- data and models


def load_data(ds: DataSection):
    """Returns ``(train, eval)`` datasets."""
    name = ds.name
    split = ds.eval_split or ("test" if name in IMAGE_SETS + ("cifar10",) else "train")
    if name in ("poly2", "poly3"):
        tr = gen_polynomial(name, ds.n, ds.noise_std, ds.seed)
        if split == "test":
            raise ConfigError("polynomial data has no test split")
        ev = tr
    elif name == "blobs":
        full = gen_blobs(ds.n_classes, ds.n_per_class, ds.dim, ds.separation, ds.seed)
        if split == "test":
            half = len(full) // 2
            tr, ev = full.subset(slice(0, half)), full.subset(slice(half, None))
        else:
            tr = ev = full
    elif name in IMAGE_SETS:
        tr = load_image_dataset(name, ds.root, "train")
        ev = load_image_dataset(name, ds.root, "test") if split == "test" else tr
    elif name == "cifar10":
        tr = load_cifar10(ds.root, "train")
        ev = load_cifar10(ds.root, "test") if split == "test" else tr
    else:
        raise ConfigError(f"unknown dataset {name!r}")
    if ds.train_limit is not None:
        tr = tr.subset(slice(0, ds.train_limit))
        if split == "train":
            ev = tr
    if ds.test_limit is not None and split == "test":
        ev = ev.subset(slice(0, ds.test_limit))
    if ds.normalize == "standardize":
        tr, ev = normalize(tr, "standardize"), normalize(ev, "standardize", reference=tr)
    return tr, ev


def make_spec(m: ModelSection, data: Dataset) -> NetworkSpec:
    head = m.output_head or ("softmax_ce_logits" if data.is_classification else "linear")
    return NetworkSpec(tuple(m.layer_widths), seed=m.seed, activation=m.activation,
                       output_head=head)


def train_pair(cfg: ExperimentConfig, tr: Dataset):
    """Two replicas from one shared init, optionally under TNA-PFN or pruning."""
    eff = cfg.effective()["mask"]
    spec = make_spec(cfg.model, tr)
    init = build_network(spec)
    mask = None
    if eff["mode"] == "tna_pfn":
        mask = sample_mask(spec, eff["ratio"], eff["seed"])
    elif eff["mode"] == "prune":
        init, mask = prune_at_init(init, eff["ratio"], eff["seed"])
    t = cfg.train
    nets, histories = [], []
    for s in t.shuffle_seeds:
        net = init.copy()
        state = OptimizerState(t.lr, t.momentum, t.weight_decay)
        _, hist = train(net, tr, t.epochs, t.batch_size, state, mask, s)
        nets.append(net)
        histories.append(hist)
    return nets, histories


# ---------------------------------------------------------------- output


class RunWriter:
    def __init__(self, out: Path, cfg: ExperimentConfig, command: str):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.command = command
        self.hash = cfg.config_hash()
        self.files = []

    @property
    def stamp(self) -> dict:
        return {"config_hash": self.hash, "tool_version": __version__}

    def _record(self, name):
        self.files.append(name)
        return self.out / name

    def json(self, name, doc: dict, with_config: bool = True):
        doc = {**doc, **self.stamp}
        if with_config:
            doc["config"] = self.cfg.effective()
        self._record(name).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def csv(self, name, text_fn):
        self._record(name).write_text(
            text_fn(f"tnalign {__version__} config_hash={self.hash}"))

    def checkpoint(self, name, net):
        save_checkpoint(self._record(name), net, extra=self.stamp)

    def manifest(self, argv):
        files = {n: hashlib.sha256((self.out / n).read_bytes()).hexdigest() for n in self.files}
        doc = {"command": self.command, "argv": list(argv), "files": files,
               "created_unix": time.time(), **self.stamp}
        (self.out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _metrics(m):
    return {"loss": m.loss, "accuracy": m.accuracy}


# ---------------------------------------------------------------- commands


def cmd_lmc(cfg: ExperimentConfig, w: RunWriter, threads: int = 1) -> dict:
    tr, ev = load_data(cfg.data)
    (a, b), hists = train_pair(cfg, tr)
    profile = sweep(a, b, ev, cfg.lmc.grid_size, threads=threads)
    report = barrier_report(profile)
    doc = {"barrier": report.to_dict(),
           "endpoint1": _metrics(profile.endpoint1), "endpoint2": _metrics(profile.endpoint2),
           "final_train": [_metrics(h[-1]) if h else None for h in hists]}
    w.csv("profile.csv", profile.to_csv)
    w.json("barrier.json", doc)
    w.checkpoint("model_a.npz", a)
    w.checkpoint("model_b.npz", b)
    return doc


def _load_pair(cfg: ExperimentConfig, tr):
    if cfg.lmc.checkpoints:
        nets = [load_checkpoint(p)[0] for p in cfg.lmc.checkpoints]
    elif cfg.lmc.from_run:
        run = Path(cfg.lmc.from_run)
        nets = [load_checkpoint(run / n)[0] for n in ("model_a.npz", "model_b.npz")]
    else:
        nets, _ = train_pair(cfg, tr)
    if nets[0].spec.layer_widths != nets[1].spec.layer_widths:
        raise ConfigError("checkpoints have different architectures")
    return nets


def cmd_rebasin(cfg: ExperimentConfig, w: RunWriter, threads: int = 1) -> dict:
    tr, ev = load_data(cfg.data)
    a, b = _load_pair(cfg, tr)
    grid = cfg.lmc.grid_size
    pre = sweep(a, b, ev, grid, threads=threads)
    doc = {"pre": barrier_report(pre).to_dict()}
    if cfg.lmc.wm:
        res = weight_match(a, b, cfg.lmc.wm_max_sweeps, cfg.lmc.wm_seed)
        b_wm = apply_permutation(b, res.perm)
        doc["wm"] = {"post": barrier_report(sweep(a, b_wm, ev, grid, threads=threads)).to_dict(),
                     "sweeps_used": res.sweeps_used, "converged": res.converged,
                     "objective_trace": res.objective_trace}
        w.json("perm_wm.json", {"perms": json.loads(res.perm.to_json())}, with_config=False)
        w.checkpoint("model_b_wm.npz", b_wm)
    if cfg.lmc.sa_iters > 0 or not cfg.lmc.wm:
        batch = ev.subset(slice(0, cfg.lmc.sa_eval_size))
        sa = simulated_annealing_match(a, b, batch, cfg.lmc.sa_iters, cfg.lmc.sa_t0,
                                       cfg.lmc.sa_decay, cfg.lmc.sa_seed)
        b_sa = apply_permutation(b, sa.perm)
        doc["sa"] = {"post": barrier_report(sweep(a, b_sa, ev, grid, threads=threads)).to_dict(),
                     "iters": cfg.lmc.sa_iters, "accepted": sa.accepted, "trace": sa.trace}
        w.json("perm_sa.json", {"perms": json.loads(sa.perm.to_json())}, with_config=False)
    w.json("rebasin.json", doc)
    return doc


def cmd_fed(cfg: ExperimentConfig, w: RunWriter, threads: int = 1) -> dict:
    tr, ev = load_data(cfg.data)
    fed = FederatedConfig(**cfg.effective()["fed"])
    spec = make_spec(cfg.model, tr)
    report, model = run_federated(fed, spec, tr, ev, threads=threads, return_model=True)
    doc = report.to_dict()
    doc.pop("config")  # the full config is echoed below
    w.json("fed_report.json", doc)
    w.csv("fed_rounds.csv", report.to_csv)
    w.checkpoint("global_model.npz", model)
    return doc


def cmd_theory(cfg: ExperimentConfig, w: RunWriter, threads: int = 1) -> dict:
    t = cfg.theory
    report = bound_check(TheoryConfig(**_theory_fields(t)), t.trials, t.base_seed,
                         threads=threads, trend_trials=t.trend_trials)
    doc = json.loads(report.to_json())
    w.json("theory_report.json", doc)
    return doc


COMMANDS = {"lmc": cmd_lmc, "rebasin": cmd_rebasin, "fed": cmd_fed, "theory": cmd_theory}


def cmd_data(args) -> dict:
    if args.action == "fetch":
        path = fetch(args.target, args.root)
        return {"fetched": args.target, "path": str(path)}
    info = inspect_file(args.target)
    return info


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tnalign", description=__doc__.splitlines()[0],
                epilog=f"Dataset cache: ${CACHE_ENV} (default ~/.cache/tnalign). "
                       "Exit codes: 0 ok, 1 config error, 2 data error, 3 numeric error.")
    p.add_argument("--version", action="version", version=f"tnalign {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {"lmc": "train two replicas and measure their interpolation barrier",
             "rebasin": "align a pair by weight matching and/or simulated annealing",
             "fed": "run the federated simulator",
             "theory": "Monte Carlo check of the concentration bounds"}
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", metavar="PATH", help="JSON experiment config")
        sp.add_argument("--out", metavar="DIR", default="tnalign_out", help="output directory")
        sp.add_argument("--threads", type=int, default=1, metavar="N",
                        help="parallel-map width; results do not depend on it")
        sp.add_argument("--seed-override", action="append", metavar="K=V", default=[],
                        help="override a seed, e.g. train.shuffle_seeds=[3,4] (repeatable)")
        if name == "lmc":
            sp.add_argument("--mask-ratio", type=float, metavar="R",
                            help="train under a shared random mask with this zero ratio")
    dp = sub.add_parser("data", help="fetch or inspect dataset files",
                        description="fetch a dataset into the cache, or dump a file header")
    dp.add_argument("action", choices=["fetch", "inspect"])
    dp.add_argument("target", help="dataset name (fetch) or file path (inspect)")
    dp.add_argument("--root", metavar="DIR", help=f"cache directory (overrides ${CACHE_ENV})")
    return p


def exit_code_for(exc: BaseException) -> int:
    while exc is not None:
        if isinstance(exc, ConfigError):
            return EXIT_CONFIG
        if isinstance(exc, DataError):
            return EXIT_DATA
        if isinstance(exc, (NumericError, DegenerateError, ArithmeticError)):
            return EXIT_NUMERIC
        exc = exc.__cause__
    return EXIT_CONFIG


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command == "data":
            print(json.dumps(cmd_data(args), indent=2, sort_keys=True))
            return EXIT_OK
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, args.seed_override)
        if getattr(args, "mask_ratio", None) is not None:
            if cfg.mask.mode != "prune":
                cfg.mask.mode = "tna_pfn"
            cfg.mask.ratio = args.mask_ratio
            cfg.validate()
        writer = RunWriter(Path(args.out), cfg, args.command)
        doc = COMMANDS[args.command](cfg, writer, args.threads)
        writer.manifest(argv)
        summary = {"command": args.command, "out": str(writer.out), **writer.stamp}
        for key in ("barrier", "final_accuracy", "violation_rate_z"):
            if key in doc:
                summary[key] = doc[key]
        print(json.dumps(summary, indent=2, sort_keys=True))
        return EXIT_OK
    except (TnalignError, OSError, ArithmeticError, ValueError) as exc:
        code = exit_code_for(exc)
        if isinstance(exc, OSError) and code == EXIT_CONFIG:
            code = EXIT_DATA
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        for attr in ("epoch", "layer", "alpha", "client_id", "round"):
            if getattr(exc, attr, None) is not None:
                err[attr] = getattr(exc, attr)
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return code


if __name__ == "__main__":
    raise SystemExit(main())
