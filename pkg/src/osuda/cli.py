"""Command line front end: ``python3 -m osuda <subcommand> [--config run.json] [--out DIR]``.

Subcommands

    gen-data   render the source, held-out target and one-shot candidate sets
    pretrain   source-only training, writes the pretrained checkpoint
    adapt      one-shot adaptation over (pick, seed) runs, per-run logs + aggregate.csv
    eval       mIoU of any checkpoint on any dataset directory
    ablate     loss / mixing / patch-size grids, one CSV per grid

Exit status is 0 on success, 2 for configuration or input problems and 3 when
training produced a non-finite value.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import adapt as A
from . import benchdata as bd
from . import segmentor as seg
from .errors import ConfigError, NumericalError, ShapeError

logger = logging.getLogger("osuda")

SCHEMA_VERSION = 1
TABLES = ("loss", "mixing", "patch")


@dataclass
class AblationSpec:
    tables: list = field(default_factory=lambda: list(TABLES))
    n_seeds: int = 3
    picks: list = field(default_factory=lambda: [0])
    patch_sizes: list | None = None  # None: 2, 4, 8 and the whole feature map
    workers: int = 1


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    num_classes: int = 5
    height: int = 64
    width: int = 64
    n_source: int = 200
    n_eval: int = 40
    n_candidates: int = 5
    source_domain: dict = field(default_factory=lambda: asdict(bd.SOURCE_DOMAIN))
    target_domain: dict = field(default_factory=lambda: asdict(bd.TARGET_DOMAIN))
    out_dir: str = "run"
    data_dir: str | None = None  # default <out_dir>/data
    pretrained: str | None = None  # default <out_dir>/pretrained.ckpt
    picks: list | None = None  # default: every candidate
    n_seeds: int = 5
    adapt: dict = field(default_factory=dict)
    ablation: dict = field(default_factory=dict)

    # resolved views ---------------------------------------------------------

    def adapt_config(self, seed=None):
        if "seed" in self.adapt:
            raise ConfigError("set the root seed at top level, not inside adapt")
        cfg = _build(A.AdaptConfig, self.adapt, "adapt")
        return replace(cfg, seed=self.seed if seed is None else seed)

    def ablation_spec(self):
        spec = _build(AblationSpec, self.ablation, "ablation")
        bad = set(spec.tables) - set(TABLES)
        if bad:
            raise ConfigError(f"unknown ablation tables {sorted(bad)}; allowed {TABLES}")
        if spec.n_seeds < 1 or spec.workers < 1:
            raise ConfigError("ablation n_seeds and workers must be positive")
        return spec

    def domains(self):
        return (_build(bd.DomainSpec, self.source_domain, "source_domain"),
                _build(bd.DomainSpec, self.target_domain, "target_domain"))

    def data_path(self, split):
        return os.path.join(self.data_dir or os.path.join(self.out_dir, "data"), split)

    def checkpoint_path(self):
        return self.pretrained or os.path.join(self.out_dir, "pretrained.ckpt")

    def run_plan(self, limit=None):
        """(run id, pick, seed) in pick-major order; adaptation seeds are ``seed + k``."""
        picks = list(range(self.n_candidates)) if self.picks is None else list(self.picks)
        plan = [(p, self.seed + k) for p in picks for k in range(self.n_seeds)]
        if limit is not None:
            plan = plan[:limit]
        return [(i, p, s) for i, (p, s) in enumerate(plan)]

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}")
        if min(self.n_source, self.n_eval, self.n_candidates, self.n_seeds) < 1:
            raise ConfigError("dataset sizes and n_seeds must be positive")
        if self.height % 4 or self.width % 4:
            raise ConfigError(f"image size {self.height}x{self.width} must be divisible by 4")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        for p in self.picks or []:
            if not 0 <= p < self.n_candidates:
                raise ConfigError(f"pick {p} outside the {self.n_candidates} candidates")
        self.domains()
        self.adapt_config().check_feature_size(self.height // 4, self.width // 4)
        self.ablation_spec()
        return self


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path=None, out=None, seed=None):
    values = {}
    if path is not None:
        try:
            with open(path) as fh:
                values = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc})") from None
        if "schema_version" not in values:
            raise ConfigError(f"{path}: missing schema_version")
    cfg = _build(RunConfig, values, "config")
    if out is not None:
        cfg.out_dir = out
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


# ---- file helpers -----------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _writable_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def _load_dataset(path):
    try:
        return bd.load_dataset(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"{exc}; run gen-data first or fix data_dir") from None


def _load_checkpoint(path):
    if not os.path.isfile(path):
        raise ConfigError(f"checkpoint {path} not found; run pretrain first or fix the path")
    return seg.load_checkpoint(path)


def _load_benchmark(cfg):
    return {split: _load_dataset(cfg.data_path(split)) for split in ("source", "eval", "candidates")}


# ---- subcommands ---------------------------------------------------------------

def cmd_gen_data(cfg, args):
    src, tgt = cfg.domains()
    data = bd.build_benchmark(cfg.seed, cfg.num_classes, cfg.height, cfg.width, cfg.n_source,
                              cfg.n_eval, cfg.n_candidates, src, tgt)
    manifest = {"schema_version": SCHEMA_VERSION, "seed": cfg.seed, "splits": {}}
    for split, ds in data.items():
        path = _writable_dir(cfg.data_path(split))
        bd.save_dataset(path, ds)
        manifest["splits"][split] = {"path": path, "samples": len(ds)}
    root = os.path.dirname(cfg.data_path("source"))
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


def cmd_pretrain(cfg, args):
    _writable_dir(cfg.out_dir)
    source = _load_dataset(cfg.data_path("source"))
    acfg = cfg.adapt_config()
    log = []
    t0 = time.perf_counter()
    params = A.pretrain_source(acfg, source, seg.SegmentorConfig(num_classes=source.num_classes), log)
    ckpt = cfg.checkpoint_path()
    _writable_dir(os.path.dirname(ckpt) or ".")
    seg.save_checkpoint(ckpt, params)
    write_csv(os.path.join(cfg.out_dir, "pretrain_log.csv"), ("iter", "lr", "loss"),
              ([r["iter"], r["lr"], r["loss"]] for r in log))
    report = bd.evaluate(params, source)
    print(f"pretrained {acfg.pretrain_iters} iterations in {time.perf_counter() - t0:.1f}s; "
          f"source mIoU {report.miou:.4f}; checkpoint {ckpt}")
    return 0


def cmd_adapt(cfg, args):
    out = _writable_dir(cfg.out_dir)
    data = _load_benchmark(cfg)
    pretrained = _load_checkpoint(cfg.checkpoint_path())
    plan = cfg.run_plan(args.runs)
    if not plan:
        raise ConfigError("no runs selected")
    for _, pick, _ in plan:
        if pick >= len(data["candidates"]):
            raise ConfigError(f"pick {pick} outside the {len(data['candidates'])} candidates on disk")
    c = pretrained.config.num_classes
    base = bd.evaluate(pretrained, data["eval"])
    print(f"source-only mIoU {base.miou:.4f}")

    rows = []
    for run_id, pick, seed in plan:
        sample = data["candidates"][pick]
        res = A.adapt_one_shot(pretrained, data["source"], sample.image, cfg.adapt_config(seed))
        report = bd.evaluate(res.params, data["eval"])
        run_dir = _writable_dir(os.path.join(out, "runs", f"run_{run_id:03d}"))
        A.write_log_csv(os.path.join(run_dir, "log.csv"), res.log)
        seg.save_checkpoint(os.path.join(run_dir, "adapted.ckpt"), res.params)
        rows.append([run_id, sample.sample_id, seed, *report.iou, report.miou, report.miou - base.miou])
        print(f"run {run_id}: pick {pick} seed {seed} mIoU {report.miou:.4f} "
              f"gain {report.miou - base.miou:+.4f}")

    table = np.array([r[3:] for r in rows], dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN column: class absent everywhere
        means = np.nanmean(table, axis=0)
    summary = ["mean", "", "", *means]
    header = ["run_id", "image_id", "seed", *[f"iou_{k}" for k in range(c)], "miou", "gain"]
    write_csv(os.path.join(out, "aggregate.csv"), header, rows + [summary])
    write_csv(os.path.join(out, "source_only.csv"), ["dataset", *header[3:-1]],
              [["eval", *base.iou, base.miou]])
    positive = sum(r[-1] > 0 for r in rows)
    print(f"mean adapted mIoU {means[-2]:.4f} vs source-only {base.miou:.4f}; "
          f"positive gain in {positive}/{len(rows)} runs")
    return 0


def cmd_eval(cfg, args):
    ckpt = args.checkpoint or cfg.checkpoint_path()
    dataset = _load_dataset(args.dataset or cfg.data_path("eval"))
    params = _load_checkpoint(ckpt)
    if params.config.num_classes != dataset.num_classes:
        raise ConfigError(f"checkpoint has {params.config.num_classes} classes, dataset {dataset.num_classes}")
    report = bd.evaluate(params, dataset)
    out = _writable_dir(cfg.out_dir)
    header = ["checkpoint", "dataset", *[f"iou_{k}" for k in range(dataset.num_classes)], "miou"]
    write_csv(os.path.join(out, "eval.csv"), header,
              [[ckpt, args.dataset or cfg.data_path("eval"), *report.iou, report.miou]])
    print(f"mIoU {report.miou:.4f}")
    return 0


def ablation_grids(cfg, spec):
    full = cfg.height // 4
    sizes = spec.patch_sizes or [2, 4, 8, full]
    grids = {"loss": A.loss_grid(), "mixing": A.mixing_grid(), "patch": A.patch_grid(tuple(sizes))}
    return {t: grids[t] for t in spec.tables}


def cmd_ablate(cfg, args):
    out = _writable_dir(cfg.out_dir)
    spec = cfg.ablation_spec()
    data = _load_benchmark(cfg)
    pretrained = _load_checkpoint(cfg.checkpoint_path())
    n_seeds = spec.n_seeds if args.runs is None else min(spec.n_seeds, args.runs)
    seeds = [cfg.seed + k for k in range(n_seeds)]
    base = cfg.adapt_config()
    for table, grid in ablation_grids(cfg, spec).items():
        for overrides in grid.values():
            replace(base, **overrides).check_feature_size(cfg.height // 4, cfg.width // 4)
        runs, summary = A.ablation_suite(pretrained, data, base, grid, seeds, spec.picks, spec.workers)
        write_csv(os.path.join(out, f"ablation_{table}.csv"), ("cell", "seed", "pick", "miou"),
                  ([r["cell"], r["seed"], r["pick"], r["miou"]] for r in runs))
        write_csv(os.path.join(out, f"ablation_{table}_summary.csv"), ("cell", "runs", "mean_miou", "std_miou"),
                  ([s["cell"], s["runs"], s["mean_miou"], s["std_miou"]] for s in summary))
        print(table + ": " + ", ".join(f"{s['cell']}={s['mean_miou']:.4f}" for s in summary))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="osuda", description="one-shot style-mixing adaptation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="RunConfig JSON; defaults apply when omitted")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="root seed (overrides seed)")
        p.add_argument("--runs", type=int, help="cap on adaptation runs (adapt) or seeds (ablate)")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint to evaluate (default: pretrained)")
            p.add_argument("--dataset", help="dataset directory (default: the eval split)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.runs is not None and args.runs < 1:
            raise ConfigError("--runs must be positive")
        cfg = load_config(args.config, args.out, args.seed)
        return COMMANDS[args.command](cfg, args)
    except NumericalError as exc:
        where = f" at iteration {exc.iteration}" if exc.iteration is not None else ""
        print(f"error: numerical failure{where}: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ShapeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
