"""``dcnseg`` command line: phantom, train, infer, eval, xval, selftrain, ablate, plot.

Heavy parameters live in a JSON experiment config; flags override it.  Exit
codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

CONFIG_VERSION = "1"


class UsageError(Exception):
    pass


class ConfigError(UsageError):
    pass


def _check_keys(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


@dataclass
class ExperimentConfig:
    phantom: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    selftrain: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    config_version: str = CONFIG_VERSION

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        from .losses import LossConfig
        from .network import ModelConfig
        from .phantom import PhantomConfig
        from .selftrain import SelfTrainConfig
        from .trainer import TrainConfig

        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        _check_keys(cls, d, "experiment config")
        version = str(d.get("config_version", CONFIG_VERSION))
        if version != CONFIG_VERSION:
            raise ConfigError(f"config_version {version!r} is not supported (expected {CONFIG_VERSION!r})")
        _check_keys(PhantomConfig, d.get("phantom", {}), "phantom")
        train = d.get("train", {})
        _check_keys(TrainConfig, train, "train")
        _check_keys(ModelConfig, train.get("model", {}), "train.model")
        _check_keys(LossConfig, train.get("loss_config", {}), "train.loss_config")
        _check_keys(SelfTrainConfig, d.get("selftrain", {}), "selftrain")
        for k, v in d.get("paths", {}).items():
            if not isinstance(v, str):
                raise ConfigError(f"paths.{k} must be a string")
        cfg = cls(**{**d, "config_version": version})
        try:
            cfg.phantom_config()
            cfg.train_config()
            cfg.selftrain_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def phantom_config(self, seed=None):
        from .phantom import PhantomConfig

        d = dict(self.phantom)
        if "volume_shape" in d:
            d["volume_shape"] = tuple(d["volume_shape"])
        if seed is not None:
            d["seed"] = seed
        return PhantomConfig(**d)

    def train_config(self, seed=None, **overrides):
        from .trainer import TrainConfig

        d = {**self.train, **overrides}
        if seed is not None:
            d["seed"] = seed
        return TrainConfig.from_dict(d)

    def selftrain_config(self, seed=None, **overrides):
        from .selftrain import SelfTrainConfig

        d = {**self.selftrain, **overrides}
        if seed is not None:
            d["seed"] = seed
        return SelfTrainConfig(**d)

    def resolved(self, seed=None) -> dict:
        """Every section with defaults filled in, as written beside outputs."""
        return {
            "config_version": self.config_version,
            "phantom": _jsonable(asdict(self.phantom_config(seed))),
            "train": self.train_config(seed).to_dict(),
            "selftrain": self.selftrain_config(seed).to_dict(),
            "paths": dict(self.paths),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    return path


def _snapshot(out_dir, exp: ExperimentConfig, seed, command: str, extra=None):
    doc = {"command": command, **exp.resolved(seed)}
    if extra:
        doc["arguments"] = extra
    return _write_json(Path(out_dir) / "resolved_config.json", doc)


def _history_for_report(h):
    """History without wall-clock time, so reruns compare field-equal."""
    d = h.to_dict()
    d.pop("wall_seconds", None)
    return d


# -- subcommands --------------------------------------------------------------

def cmd_phantom(args, exp):
    from .phantom import generate_dataset

    cfg = exp.phantom_config(args.seed)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    generate_dataset(args.count, cfg.seed, cfg, args.out, n_labeled=args.labeled)
    _snapshot(args.out, exp, args.seed, "phantom", {"count": args.count, "labeled": args.labeled})
    print(f"wrote {args.count} phantoms to {args.out}")


def _load_labeled(data):
    from .io import load_cases

    cases = load_cases(data, labeled=True)
    if not cases:
        raise UsageError(f"{data} holds no labeled cases")
    return cases


def cmd_train(args, exp):
    from .network import save_checkpoint
    from .trainer import train

    cfg = exp.train_config(args.seed)
    cases = _load_labeled(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out, exp, args.seed, "train", {"data": str(args.data)})
    model, hist = train(cases, cfg, log_path=out / "train_log.jsonl")
    save_checkpoint(model, out / "checkpoint")
    hist.save(out / "history.json")
    print(f"best epoch {hist.best_epoch} of {hist.stopped_epoch}, val loss {hist.best_val:.4f}")


def _train_config_for_model(model_dir, exp, args):
    snap = Path(model_dir) / "resolved_config.json"
    if args.config is None and snap.exists():
        return ExperimentConfig.from_dict(
            {k: v for k, v in json.loads(snap.read_text()).items() if k != "command" and k != "arguments"}
        ).train_config(args.seed)
    return exp.train_config(args.seed)


def _load_model(model_dir):
    from .network import load_checkpoint

    path = Path(model_dir)
    return load_checkpoint(path / "checkpoint" if (path / "checkpoint").is_dir() else path)


def cmd_infer(args, exp):
    import torch

    from .io import load_volume, save_volume
    from .trainer import infer_volume, normalize_image, reference_set

    cfg = _train_config_for_model(args.model, exp, args)
    model = _load_model(args.model)
    image, spacing = load_volume(args.image)
    refs = reference_set(_load_labeled(args.references), cfg)
    res = infer_volume(model, image.astype(np.float32), refs, cfg)
    out = Path(args.out)
    _snapshot(out, exp, args.seed, "infer", {"image": str(args.image), "model": str(args.model)})
    save_volume(out / "labels.nii.gz", res.labels, spacing)
    save_volume(out / "prob_dentate.nii.gz", res.prob_dentate[1], spacing)
    save_volume(out / "prob_interposed.nii.gz", res.prob_interposed[1], spacing)
    _write_json(
        out / "inference.json",
        {"roi": res.roi.to_json(), "raw_overlap": res.raw_overlap, "reference": res.reference,
         "translation": list(res.translation)},
    )
    if args.dump_features:
        # encoder features of the ROI-centred patch
        roi = res.roi
        p = np.array(cfg.patch_size)
        start = np.array(roi.origin) + (np.array(roi.shape) - p) // 2
        crop = normalize_image(image)[tuple(slice(s, s + n) for s, n in zip(start, p))]
        with torch.no_grad():
            feats = model(torch.from_numpy(crop[None, None]), return_features=True).features
        for name, t in feats.items():
            save_volume(out / "features" / f"{name}.nii.gz", t[0].permute(1, 2, 3, 0).numpy(), spacing)
    print(f"labels written to {out / 'labels.nii.gz'} (raw overlap {res.raw_overlap} voxels)")


def cmd_eval(args, exp):
    from .io import load_volume
    from .metrics import evaluate_case, write_reports_json, write_table_csv

    pred, ps = load_volume(args.pred)
    gt, _ = load_volume(args.gt)
    spacing = args.spacing if args.spacing is not None else ps
    rep = evaluate_case(pred.astype(np.uint8), gt.astype(np.uint8), spacing, Path(args.pred).name)
    out = Path(args.out) if args.out else Path(args.pred).parent
    out.mkdir(parents=True, exist_ok=True)
    write_reports_json(out / "metrics.json", [rep])
    write_table_csv(out / "metrics.csv", [rep])
    print(json.dumps(rep.to_dict(), indent=2))


def cmd_xval(args, exp):
    from .metrics import aggregate, write_table_csv
    from .trainer import cross_validate

    cfg = exp.train_config(args.seed)
    cases = _load_labeled(args.data)
    out = Path(args.out)
    _snapshot(out, exp, args.seed, "xval", {"data": str(args.data), "folds": args.folds})
    results = cross_validate(cases, args.folds, cfg, out_dir=out)
    pooled = [r for f in results for r in f.reports]
    write_table_csv(out / "pooled.csv", pooled)
    _write_json(
        out / "summary.json",
        {"folds": [{"fold": f.fold, "test": f.test_ids, "fit": f.fit_ids, "val": f.val_ids} for f in results],
         "aggregate": aggregate(pooled)},
    )
    agg = aggregate(pooled)
    print(" ".join(f"{n} DC {agg[n]['dc']['mean']:.3f}" for n in agg))


def cmd_selftrain(args, exp):
    from .io import load_cases
    from .network import save_checkpoint
    from .selftrain import run_selftrain, write_auxiliary

    overrides = {"strategy": args.strategy} if args.strategy else {}
    st = exp.selftrain_config(args.seed, **overrides)
    cfg = exp.train_config(args.seed)
    labeled = _load_labeled(args.data)
    unlabeled = load_cases(args.unlabeled or args.data, labeled=False)
    if not unlabeled:
        raise UsageError("no unlabeled cases found")
    out = Path(args.out)
    _snapshot(out, exp, args.seed, "selftrain", {"data": str(args.data)})
    res = run_selftrain(labeled, unlabeled, cfg, st)
    save_checkpoint(res.model, out / "checkpoint")
    if res.auxiliary:
        write_auxiliary(out / "auxiliary", res.auxiliary, res.auxiliary[0].spacing_mm)
    summary = res.summary()
    summary["histories"] = {k: _history_for_report(h) for k, h in res.histories.items()}
    _write_json(out / "summary.json", summary)
    print(f"{st.strategy}: {len(res.auxiliary)} auxiliary cases, fell back: {res.fell_back}")


def cmd_ablate(args, exp):
    from .metrics import aggregate, evaluate_case, write_reports_json
    from .plots import emit_plots
    from .trainer import ABLATIONS, infer_volume, reference_set, train

    names = args.ablations.split(",") if args.ablations else list(ABLATIONS)
    for n in names:
        if n not in ABLATIONS:
            raise UsageError(f"unknown ablation {n!r}; expected one of {ABLATIONS}")

    train_cases = _load_labeled(args.data)
    test_cases = _load_labeled(args.test)
    out = Path(args.out)
    _snapshot(out, exp, args.seed, "ablate", {"data": str(args.data), "test": str(args.test), "ablations": names})
    histories, summary, all_reports = {}, {}, []
    for n in names:
        cfg = exp.train_config(args.seed, ablation=n)
        model, hist = train(train_cases, cfg)
        refs = reference_set(train_cases, cfg)
        reports, overlap = [], []
        for c in test_cases:
            res = infer_volume(model, c.image, refs, cfg)
            reports.append(evaluate_case(res.labels, c.labels, c.spacing_mm, c.id))
            overlap.append(res.raw_overlap)
        histories[n] = hist
        all_reports += reports
        write_reports_json(out / n / "report.json", reports, {"raw_overlap": overlap})
        hist.save(out / n / "history.json")
        summary[n] = {"aggregate": aggregate(reports), "mean_raw_overlap": float(np.mean(overlap))}
    _write_json(out / "summary.json", summary)
    emit_plots(histories, all_reports, out / "plots")
    for n in names:
        a = summary[n]["aggregate"]
        print(f"{n}: dentate DC {a['dentate']['dc']['mean']:.3f} interposed DC {a['interposed']['dc']['mean']:.3f}"
              f" raw overlap {summary[n]['mean_raw_overlap']:.1f}")


def cmd_plot(args, exp):
    from .plots import emit_plots
    from .trainer import TrainHistory

    histories = {}
    for h in args.history:
        if "=" in h:
            name, path = h.split("=", 1)
        else:
            name, path = Path(h).parent.name or "run", h
        histories[name] = TrainHistory.load(path)
    reports = []
    for r in args.reports:
        reports += json.loads(Path(r).read_text())["cases"]
    for p in emit_plots(histories, reports, args.out):
        print(p)


# -- parser -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcnseg", description="Deep cerebellar nuclei analog segmentation experiments.",
                allow_abbrev=False)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_, out_required=True):
        s = sub.add_parser(name, help=help_, allow_abbrev=False)
        s.add_argument("--config", default=None, help="JSON experiment config")
        s.add_argument("--seed", type=int, default=None, help="overrides every section's seed")
        s.add_argument("--out", required=out_required, help="output directory")
        s.set_defaults(func=fn)
        return s

    s = add("phantom", cmd_phantom, "generate a synthetic phantom dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--labeled", type=int, default=None, help="label only the first N cases")

    s = add("train", cmd_train, "train a model on a labeled dataset")
    s.add_argument("--data", required=True)

    s = add("infer", cmd_infer, "segment one volume")
    s.add_argument("--model", required=True, help="train output directory or checkpoint directory")
    s.add_argument("--image", required=True)
    s.add_argument("--references", required=True, help="labeled dataset used for ROI localization")
    s.add_argument("--dump-features", action="store_true", help="also write encoder feature volumes")

    s = add("eval", cmd_eval, "score a predicted label map against ground truth", out_required=False)
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--spacing", type=float, default=None, help="voxel size in mm (default: from header)")

    s = add("xval", cmd_xval, "k-fold cross-validation")
    s.add_argument("--data", required=True)
    s.add_argument("--folds", type=int, default=5)

    s = add("selftrain", cmd_selftrain, "semi-supervised training with unlabeled cases")
    s.add_argument("--data", required=True, help="dataset with labeled (and possibly unlabeled) cases")
    s.add_argument("--unlabeled", default=None, help="separate dataset of unlabeled cases")
    s.add_argument("--strategy", choices=("pretrain_finetune", "distillation"), default=None)

    s = add("ablate", cmd_ablate, "train each ablation and compare on a test set")
    s.add_argument("--data", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--ablations", default=None, help="comma-separated subset")

    s = add("plot", cmd_plot, "loss curves and metric distributions")
    s.add_argument("--history", nargs="+", required=True, help="history.json files, optionally NAME=PATH")
    s.add_argument("--reports", nargs="+", required=True, help="report JSON files")
    return p


def _threads():
    v = os.environ.get("DCNSEG_THREADS")
    if v is None:
        return
    try:
        n = int(v)
    except ValueError:
        raise UsageError(f"DCNSEG_THREADS must be an integer, got {v!r}")
    if n < 1:
        raise UsageError("DCNSEG_THREADS must be >= 1")
    import torch

    torch.set_num_threads(n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        exp = ExperimentConfig.load(args.config)
        _threads()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        args.func(args, exp)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
