"""Command-line entry point: ``specemo {synth,extract,train,eval,cross,report}``.

Exit codes: 0 success, 1 usage or config error, 2 partial data failure,
3 internal error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import audio_io, evaluation, spectro
from . import nncore as nn
from .attention import map_to_gray
from .backbone import Backbone, BackboneConfig
from .features import ImageLoader, default_cache_root, file_digest
from .heads import DSNet, SvcClassifier, SvcModel, TrainConfig

log = logging.getLogger("specemo")

SCHEMA_VERSION = 1

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL, EXIT_INTERNAL = 0, 1, 2, 3


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class MissingReport(FileNotFoundError):
    pass


def default_config() -> dict:
    backbone = BackboneConfig().to_dict()
    backbone["weights"] = None
    return {
        "schema_version": SCHEMA_VERSION,
        "experiment": "experiment",
        "dataset": {"manifest": None, "test_manifest": None},
        "spectro": spectro.SpectroParams().to_dict(),
        "backbone": backbone,
        "train": TrainConfig().to_dict(),
        "eval": {"fold_kind": "stratified", "k": 10, "seed": 0, "val_fraction": 0.3},
        "report": {"attention_samples": 4},
        "output_dir": "runs",
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(where, "unknown key")
        if isinstance(base[key], dict) and base[key] is not None:
            if not isinstance(value, dict):
                raise ConfigError(where, "expected an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def config_digest(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in ("output_dir", "_base_dir")}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


class Experiment:
    """A validated config with its parsed sections."""

    def __init__(self, raw: dict, base_dir: Path):
        self.raw = raw
        self.base_dir = base_dir
        self.digest = config_digest(raw)
        self.spectro = self._section("spectro", lambda d: spectro.SpectroParams.from_dict(d))
        bb = dict(raw["backbone"])
        self.weights = bb.pop("weights", None)
        self.backbone = self._section("backbone", lambda d: BackboneConfig.from_dict(bb))
        self.train = self._section("train", TrainConfig.from_dict)
        ev = raw["eval"]
        if ev["fold_kind"] not in ("stratified", "by_speaker"):
            raise ConfigError("eval.fold_kind", f"must be stratified or by_speaker, got {ev['fold_kind']!r}")
        if not isinstance(ev["k"], int) or ev["k"] < 2:
            raise ConfigError("eval.k", "must be an integer >= 2")
        if tuple(self.spectro.image_hw) != tuple(self.backbone.input_hw):
            raise ConfigError("spectro.image_hw", f"{self.spectro.image_hw} != backbone.input_hw "
                                                  f"{self.backbone.input_hw}")

    def _section(self, key, build):
        try:
            return build(self.raw[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(key, str(exc)) from None

    def path(self, key: str) -> Path:
        section, name = key.split(".")
        value = self.raw[section][name]
        if not value:
            raise ConfigError(key, "missing")
        p = Path(value)
        if not p.is_absolute():
            p = self.base_dir / p
        if not p.exists():
            raise ConfigError(key, f"{p} does not exist")
        return p

    def manifest(self, key: str = "dataset.manifest") -> audio_io.DatasetManifest:
        try:
            return audio_io.load_manifest(self.path(key))
        except audio_io.ManifestError as exc:
            raise ConfigError(key, f"{type(exc).__name__}: {exc}") from None

    def model_spec(self) -> evaluation.ModelSpec:
        weights = None
        if self.weights:
            weights = str(self.path("backbone.weights"))
        return evaluation.ModelSpec(self.train, self.backbone, weights)

    def loader(self) -> ImageLoader:
        cache = default_cache_root() or Path(self.raw["output_dir"]) / ".cache"
        return ImageLoader(self.spectro, cache)


def load_config(path, seed=None, out=None) -> Experiment:
    path = Path(path)
    try:
        user = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("--config", f"{path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    version = user.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version}")
    cfg = _merge(default_config(), user)
    if seed is not None:
        cfg["train"]["seed"] = seed
        cfg["eval"]["seed"] = seed
    if out is not None:
        cfg["output_dir"] = str(out)
    elif not Path(cfg["output_dir"]).is_absolute():
        cfg["output_dir"] = str(path.parent / cfg["output_dir"])
    return Experiment(cfg, path.parent)


# -- artifact helpers -------------------------------------------------------------

def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _run_dir(exp: Experiment, run_id=None) -> Path:
    rid = run_id or f"{time.strftime('%Y%m%dT%H%M%S', time.gmtime())}-{exp.digest[:12]}"
    d = Path(exp.raw["output_dir"]) / rid
    d.mkdir(parents=True, exist_ok=True)
    _write(d / "config.json", _json({**exp.raw, "_base_dir": str(exp.base_dir.resolve())}))
    return d


def _checkpoint_meta(exp: Experiment, labels) -> dict:
    return {"config_digest": exp.digest, "mode": exp.train.mode, "labels": list(labels),
            "backbone": exp.backbone.to_dict()}


def _save_model(model, path: Path, meta: dict) -> None:
    nn.save_weights(path, model.state_dict(), meta)


def _predictions_csv(manifest, rows, digest: str) -> str:
    lines = ["index,path,speaker,true,pred,fold,config_digest"]
    for idx, pred, fold in rows:
        s = manifest.samples[idx]
        lines.append(f"{idx},{s.path},{s.speaker_id},{s.label},{manifest.label_set[pred]},{fold},{digest}")
    return "\n".join(lines) + "\n"


def _emit_report(run: Path, report: evaluation.EvalReport, exp: Experiment) -> None:
    report.config_digest = exp.digest
    report.experiment = exp.raw["experiment"]
    _write(run / "report.json", report.to_json())
    table = report.format_table()
    _write(run / "report.txt", table + "\n")
    print(table)


# -- commands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = audio_io.SynthSpec(classes=args.classes, speakers=args.speakers, clips=args.clips,
                              seed=args.seed if args.seed is not None else 0, neutral_styles=args.neutral_styles,
                              labels=args.labels.split(",") if args.labels else None)
    manifest = audio_io.synth_dataset(spec, args.out, name=args.name)
    print(f"wrote {len(manifest)} clips and {Path(args.out) / (args.name + '.csv')}")
    return EXIT_OK


def _image_name(sample_path: str) -> str:
    stem = sample_path.replace("\\", "/").replace("/", "__")
    return Path(stem).with_suffix(".ppm").name


def cmd_extract(args) -> int:
    exp = load_config(args.config, args.seed, None)
    manifest = exp.manifest()
    out = Path(args.out) if args.out else Path(exp.raw["output_dir"]) / "extract"
    (out / "images").mkdir(parents=True, exist_ok=True)
    loader = exp.loader()

    def work(sample):
        path = manifest.resolve(sample)
        try:
            img = loader(path)
            name = _image_name(sample.path)
            spectro.write_ppm(out / "images" / name, img, f"config_digest {exp.digest}")
            return sample.path, name, file_digest(path), None
        except (OSError, ValueError) as exc:
            return sample.path, None, None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(work, manifest.samples))
    rows = ["path,image,digest,config_digest"]
    errors = []
    for path, name, digest, err in results:
        if err:
            errors.append((path, err))
        else:
            rows.append(f"{path},images/{name},{digest},{exp.digest}")
    _write(out / "index.csv", "\n".join(rows) + "\n")
    log.info("extract: %d cache hits, %d computed", loader.hits, loader.misses)
    print(f"{len(rows) - 1} images written to {out} (cache hits: {loader.hits}, computed: {loader.misses})")
    for path, err in errors:
        print(f"error: {path}: {err}", file=sys.stderr)
    return EXIT_PARTIAL if errors else EXIT_OK


def _trunk(exp: Experiment):
    spec = exp.model_spec()
    if not spec.weights:
        return None
    trunk = Backbone.build(exp.backbone, exp.train.seed)
    trunk.load_weights(spec.weights)
    return trunk


def cmd_train(args) -> int:
    exp = load_config(args.config, args.seed, args.out)
    manifest = evaluation.collapse_neutral(exp.manifest())
    run = _run_dir(exp, args.run_id)
    loader = exp.loader()
    spec = exp.model_spec()
    # the "test" side is the training corpus itself, giving a resubstitution report
    report, result = evaluation.holdout(manifest, manifest, spec, loader, exp.raw["eval"]["seed"],
                                        exp.raw["eval"]["val_fraction"])
    model = result.model
    report.config_digest = exp.digest
    _write(run / "train_report.json", report.to_json())
    _save_model(model, run / "model.weights", _checkpoint_meta(exp, manifest.label_set))
    _write(run / "history.json", _json({"config_digest": exp.digest, "history": model.history}))
    last = model.history[-1] if model.history else {}
    print(f"trained {exp.train.mode} model, {len(model.history)} epoch(s); last: {last}")
    print(f"accuracy on the training corpus: {report.accuracy:.3f}")
    print(f"run directory: {run}")
    return EXIT_OK


def cmd_eval(args) -> int:
    exp = load_config(args.config, args.seed, args.out)
    manifest = evaluation.collapse_neutral(exp.manifest())
    ev = exp.raw["eval"]
    plan = evaluation.make_folds(manifest, ev["fold_kind"], ev["k"], ev["seed"], ev["val_fraction"])
    run = _run_dir(exp, args.run_id)
    agg, folds = evaluation.run_cv(manifest, exp.model_spec(), plan, exp.loader(), jobs=args.jobs,
                                   keep_models=True, experiment=exp.raw["experiment"])
    rows = []
    meta = _checkpoint_meta(exp, manifest.label_set)
    for r in folds:
        r.report.config_digest = exp.digest
        _write(run / "folds" / f"fold_{r.fold:02d}.json", r.report.to_json())
        _save_model(r.model, run / "folds" / f"fold_{r.fold:02d}.weights", {**meta, "fold": r.fold})
        rows.extend((int(i), int(p), r.fold) for i, p in zip(r.test_indices, r.predictions))
    rows.sort()
    _write(run / "predictions.csv", _predictions_csv(manifest, rows, exp.digest))
    _emit_report(run, agg, exp)
    print(f"run directory: {run}")
    return EXIT_OK


def cmd_cross(args) -> int:
    exp = load_config(args.config, args.seed, args.out)
    train_m = exp.manifest("dataset.manifest")
    test_m = exp.manifest("dataset.test_manifest")
    run = _run_dir(exp, args.run_id)
    report, result = evaluation.cross_corpus(train_m, test_m, exp.model_spec(), exp.loader(),
                                             exp.raw["eval"]["seed"], val_fraction=exp.raw["eval"]["val_fraction"])
    filtered = evaluation.normal_neutral_only(test_m) if evaluation.has_neutral_styles(test_m) else test_m
    rows = [(int(i), int(p), 0) for i, p in zip(result.test_indices, result.predictions)]
    _write(run / "predictions.csv", _predictions_csv(filtered, rows, exp.digest))
    _save_model(result.model, run / "model.weights", _checkpoint_meta(exp, test_m.label_set))
    _emit_report(run, report, exp)
    print(f"run directory: {run}")
    return EXIT_OK


def confusion_heatmap(confusion: np.ndarray, cell: int = 16) -> np.ndarray:
    """Row-normalised confusion matrix as an RGB image, one square per cell."""
    cm = np.asarray(confusion, dtype=np.float64)
    rows = cm.sum(axis=1, keepdims=True)
    norm = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    rgb = spectro.apply_colormap(norm, spectro.load_colormap())
    return np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)


def load_model(path):
    """Rebuild a classifier from a checkpoint written by train/eval/cross."""
    tensors, meta = nn.load_weights(path)
    config = BackboneConfig.from_dict(meta["backbone"])
    n_classes = len(meta["labels"])
    if meta["mode"] == "svc":
        trunk = Backbone.build(config)
        trunk.load_state_dict(tensors, strict=False)
        return SvcClassifier(trunk, SvcModel.from_tensors(tensors)), meta
    net = DSNet.build(meta["mode"], config, n_classes)
    net.load_state_dict(tensors)
    return net, meta


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    if not (run / "report.json").exists():
        raise MissingReport(f"{run / 'report.json'} not found")
    data = json.loads((run / "report.json").read_text())
    cfg = json.loads((run / "config.json").read_text())
    digest = config_digest(cfg)
    if data.get("config_digest") != digest:
        raise ConfigError("report.config_digest", f"{data.get('config_digest')} does not match config {digest}")
    report = evaluation.EvalReport.from_dict(data)
    _write(run / "report.txt", report.format_table() + "\n")
    with open(run / "confusion.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["true\\pred"] + report.labels + ["config_digest"])
        for label, row in zip(report.labels, report.confusion.tolist()):
            w.writerow([label] + row + [digest])
    spectro.write_ppm(run / "confusion.ppm", confusion_heatmap(report.confusion), f"config_digest {digest}")
    print(report.format_table())

    ckpt = run / "model.weights"
    if not ckpt.exists():
        ckpt = run / "folds" / "fold_00.weights"
    if cfg["train"]["mode"] == "am" and ckpt.exists():
        net, meta = load_model(ckpt)
        if meta.get("config_digest") != digest:
            raise ConfigError("checkpoint.config_digest", "checkpoint was written by a different config")
        base = Path(cfg.get("_base_dir", run))
        exp = Experiment(cfg, base)
        manifest = exp.manifest()
        n = min(int(cfg["report"]["attention_samples"]), len(manifest))
        loader = exp.loader()
        images = np.stack([loader(manifest.resolve(s)) for s in manifest.samples[:n]])
        map4, map5 = net.attention_maps(images)
        hw = exp.backbone.input_hw
        (run / "attention").mkdir(exist_ok=True)
        for i in range(n):
            panel = np.concatenate([map_to_gray(map4[i], hw), map_to_gray(map5[i], hw)], axis=1)
            spectro.write_ppm(run / "attention" / f"sample_{i:02d}.pgm", panel, f"config_digest {digest}")
        print(f"{n} attention map(s) written to {run / 'attention'}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="specemo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="overrides train.seed and eval.seed")
        p.add_argument("--jobs", type=int, default=1, help="worker count")
        return p

    p = common(sub.add_parser("synth", help="generate the synthetic test corpus"), config=False)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--speakers", type=int, default=5)
    p.add_argument("--clips", type=int, default=2)
    p.add_argument("--name", default="synth")
    p.add_argument("--labels", help="comma-separated class labels (overrides --classes)")
    p.add_argument("--neutral-styles", action="store_true")
    p.set_defaults(func=cmd_synth)

    common(sub.add_parser("extract", help="render spectrogram images")).set_defaults(func=cmd_extract)
    for name, func, text in (("train", cmd_train, "train one model on a manifest"),
                             ("eval", cmd_eval, "k-fold cross-validation"),
                             ("cross", cmd_cross, "train on one corpus, test on another")):
        p = common(sub.add_parser(name, help=text))
        p.add_argument("--run-id", help="run directory name (default: timestamp + digest)")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="render tables, heatmap and attention maps for a run")
    p.add_argument("run_dir")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "synth" and not args.out:
        parser.error("synth requires --out")
    try:
        return args.func(args)
    except (ConfigError, MissingReport) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
