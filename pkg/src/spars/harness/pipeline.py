"""End-to-end runs and ablation sweeps."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np

from .. import data, formats
from ..classifier import evaluate_classifier, train_classifier
from ..environment import WindowScorer
from ..errors import ParameterError, SparsError, StageError
from ..segmenter import (InferenceConfig, dice, export_segmentation, miou, roi_truth,
                         run_segmentation, threshold_map)
from ..selfplay import ObservationCache, PolicyNet, train_policy
from .config import ExperimentConfig, apply_overrides
from .persist import aggregate, export_metrics, load_net, save_net, write_csv, write_json

logger = logging.getLogger(__name__)

STREAMS = {"data": 0, "classifier": 1, "policy": 2, "inference": 3}
THRESHOLD_GRID = tuple(np.round(np.arange(0.05, 1.0, 0.05), 2))


def substream_seed(seed, name):
    """Independent 32-bit seed for one named consumer of the master seed."""
    return int(np.random.SeedSequence([int(seed), STREAMS[name]]).generate_state(1)[0])


class _Stage:
    """Wrap a pipeline stage so failures surface as StageError with timings recorded."""

    def __init__(self, name, timings):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        logger.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, f"{type(exc).__name__}: {exc}") from exc
        return False


# -- stages -----------------------------------------------------------------

def make_cases(cfg: ExperimentConfig):
    d = cfg.data
    return data.generate_dataset(d.n_cases, substream_seed(cfg.seed, "data"), d.dims,
                                 d.roi_count_range, d.positive_fraction)


def make_split(cfg: ExperimentConfig, cases):
    return data.split_dataset(
        [c.id for c in cases], cfg.data.split_ratio, substream_seed(cfg.seed, "data"), labels=[c.label for c in cases]
    )


def fit_classifier(cfg: ExperimentConfig, dev_cases):
    tc = dataclasses.replace(cfg.classifier, seed=substream_seed(cfg.seed, "classifier"))
    return train_classifier(dev_cases, tc)


def fit_policy(cfg: ExperimentConfig, classifier, dev_cases, on_update=None):
    """Self-play on development cases whose image-level label is positive."""
    train = [c for c in dev_cases if c.label == 1]
    if not train:
        raise ParameterError("no positively labelled development case to train the policy on")
    rc = dataclasses.replace(cfg.rl, seed=substream_seed(cfg.seed, "policy"),
                             extents=tuple(cfg.inference.extents), step=cfg.inference.step)
    return train_policy(classifier, train, rc, input_dims=cfg.policy.input_dims, on_update=on_update)


def segment_cases(cfg_inf: InferenceConfig, policy, classifier, cases, seed, out_dir=None, threshold=None,
                  scorers=None, prob_cache=None):
    """Run inference on ``cases``; return per-case records and maps.

    ``scorers`` (case id to WindowScorer) and ``prob_cache`` are memo tables
    that may be shared between calls with the same models.
    """
    records = []
    for i, case in enumerate(cases):
        rng = np.random.default_rng([seed, i])
        scorer = scorers.get(case.id) if scorers is not None else None
        if scorer is None:
            scorer = WindowScorer(classifier, case)
            if scorers is not None:
                scorers[case.id] = scorer
        pmap, log = run_segmentation(policy, scorer, cfg_inf, rng, prob_cache)
        mask, warn = threshold_map(pmap, cfg_inf, threshold)
        truth = roi_truth(case.mask)
        records.append({"case_id": case.id, "dice": dice(mask, truth), "miou": miou(mask, truth),
                        "steps": len(log), "warning": warn, "pmap": pmap})
        if out_dir is not None:
            export_segmentation(out_dir, case.id, pmap, mask, log)
    return records


def tune_threshold(cfg_inf: InferenceConfig, records, cases):
    """Pick the map threshold maximising mean Dice over already-computed maps."""
    truths = {c.id: roi_truth(c.mask) for c in cases}
    best, best_dice = cfg_inf.map_threshold, -1.0
    for t in THRESHOLD_GRID:
        m = np.mean([dice(threshold_map(r["pmap"], cfg_inf, t)[0], truths[r["case_id"]]) for r in records])
        if m > best_dice + 1e-12:
            best, best_dice = float(t), m
    return best, best_dice


# -- artifact-directory stages ---------------------------------------------
# Each stage reads its inputs from, and writes its outputs to, ``cfg.out`` so
# CLI subcommands can run one at a time and run_pipeline can chain them.

def _out(cfg):
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def stage_generate(cfg: ExperimentConfig):
    cases = make_cases(cfg)
    data.save_cases(cases, _out(cfg) / "data")
    return cases


def _load_cases(cfg):
    manifest = _out(cfg) / "data" / "manifest.json"
    if not manifest.exists():
        raise StageError("load", f"case manifest not found at {manifest}; run 'generate' first")
    return data.load_cases(manifest)


def stage_split(cfg: ExperimentConfig, cases=None):
    cases = cases if cases is not None else _load_cases(cfg)
    split = make_split(cfg, cases)
    write_json(_out(cfg) / "split.json", {"development": split.development, "test": split.test})
    return split


def _load_split(cfg, cases):
    path = _out(cfg) / "split.json"
    if not path.exists():
        raise StageError("load", f"split not found at {path}; run 'split' first")
    raw = json.loads(path.read_text())
    byid = {c.id: c for c in cases}
    return [byid[i] for i in raw["development"]], [byid[i] for i in raw["test"]]


def _require(path, what):
    if not Path(path).exists():
        raise StageError(what, f"{what.replace('-', ' ')} checkpoint not found at {path}")
    return load_net(path)


def stage_train_classifier(cfg: ExperimentConfig, dev=None, test=None):
    if dev is None:
        dev, test = _load_split(cfg, _load_cases(cfg))
    net, losses = fit_classifier(cfg, dev)
    out = _out(cfg)
    save_net(net, out / "classifier.spw")
    write_csv(out / "classifier_training.csv", ["epoch", "mean_loss"], list(enumerate(losses)))
    metrics = evaluate_classifier(net, test) if test else None
    if metrics is not None:
        write_json(out / "classifier_metrics.json", metrics.to_dict())
    return net, metrics


def stage_train_policy(cfg: ExperimentConfig, classifier=None, dev=None):
    if dev is None:
        dev, _ = _load_split(cfg, _load_cases(cfg))
    if classifier is None:
        classifier = _require(_out(cfg) / "classifier.spw", "classifier")
    policy, history = fit_policy(cfg, classifier, dev)
    out = _out(cfg)
    save_net(policy, out / "policy.spw")
    write_csv(out / "policy_training.csv",
              ["update", "mean_return_m", "mean_return_n", "policy_loss", "entropy"], history)
    return policy, history


def stage_segment(cfg: ExperimentConfig, classifier=None, policy=None, dev=None, test=None,
                  scorers=None, prob_cache=None):
    """Tune the map threshold on development cases, then segment the test cases."""
    out = _out(cfg)
    if policy is None:
        policy = _require(out / "policy.spw", "policy")
    if classifier is None:
        classifier = _require(out / "classifier.spw", "classifier")
    if dev is None:
        dev, test = _load_split(cfg, _load_cases(cfg))
    scorers = {} if scorers is None else scorers
    prob_cache = {} if prob_cache is None else prob_cache
    inf = cfg.inference
    seed = substream_seed(cfg.seed, "inference")
    dev_records = segment_cases(inf, policy, classifier, dev, [seed, 0], scorers=scorers, prob_cache=prob_cache)
    threshold, dev_dice = tune_threshold(inf, dev_records, dev)
    records = segment_cases(inf, policy, classifier, test, [seed, 1], out / "segmentation", threshold,
                            scorers=scorers, prob_cache=prob_cache)
    write_json(out / "threshold.json", {"map_threshold": threshold, "development_dice": dev_dice})
    write_csv(out / "segmentation" / "steps.csv", ["case_id", "steps", "warning"],
              [[r["case_id"], r["steps"], int(r["warning"])] for r in records])
    return records, threshold


@dataclasses.dataclass
class MetricsRecord:
    """Per-case overlap scores with aggregates; timings are excluded from equality."""
    per_case: list
    dice: dict
    miou: dict
    classifier: dict | None = None
    map_threshold: float | None = None
    timings: dict = dataclasses.field(default_factory=dict, compare=False)

    def to_dict(self):
        return dataclasses.asdict(self)


def stage_evaluate(cfg: ExperimentConfig, test=None, threshold=None, timings=None):
    """Score the exported masks against ROI truth and write the metric files."""
    out = _out(cfg)
    if test is None:
        _, test = _load_split(cfg, _load_cases(cfg))
    rows = []
    for case in test:
        path = out / "segmentation" / f"{case.id}_seg.spm"
        if not path.exists():
            raise StageError("evaluate", f"segmentation for {case.id} not found at {path}; run 'segment' first")
        mask = formats.read_mask(path)
        truth = roi_truth(case.mask)
        rows.append({"axis_value": None, "seed": cfg.seed, "case_id": case.id,
                     "dice": dice(mask, truth), "miou": miou(mask, truth)})
    export_metrics(rows, out / "metrics")
    clf_path = out / "classifier_metrics.json"
    clf = json.loads(clf_path.read_text()) if clf_path.exists() else None
    if threshold is None and (out / "threshold.json").exists():
        threshold = json.loads((out / "threshold.json").read_text())["map_threshold"]
    record = MetricsRecord(
        per_case=[{k: r[k] for k in ("case_id", "dice", "miou")} for r in rows],
        dice=aggregate(r["dice"] for r in rows), miou=aggregate(r["miou"] for r in rows),
        classifier=clf, map_threshold=threshold, timings=dict(timings or {}))
    write_json(out / "metrics_record.json", record.to_dict())
    return record


def model_key(cfg: ExperimentConfig):
    """Everything that determines the trained classifier and policy, as a string."""
    flat = cfg.to_flat()
    keep = {k: v for k, v in flat.items()
            if k.split(".")[0] in ("seed", "data", "classifier", "rl", "policy")
            or k in ("inference.extents", "inference.step")}
    return json.dumps(keep, sort_keys=True)


def run_pipeline(cfg: ExperimentConfig, models=None, model_cache=None) -> MetricsRecord:
    """Generate, split, train both networks, segment the test split and score it.

    Every artifact lands under ``cfg.out``; a failing stage raises StageError
    and leaves what earlier stages wrote.  ``models`` may carry a
    ``(classifier, policy)`` pair to skip training.  ``model_cache`` (a dict
    keyed by :func:`model_key`) lets runs whose training inputs coincide
    share trained models; the networks are only read after training.
    """
    cfg.validate()
    timings = {}
    _out(cfg)
    write_json(Path(cfg.out) / "config.json", cfg.to_flat())
    with _Stage("generate", timings):
        cases = stage_generate(cfg)
    with _Stage("split", timings):
        split = stage_split(cfg, cases)
        byid = {c.id: c for c in cases}
        dev, test = [byid[i] for i in split.development], [byid[i] for i in split.test]
    key = model_key(cfg)
    if models is None and model_cache is not None:
        models = model_cache.get(key)
    if models is None:
        with _Stage("train-classifier", timings):
            classifier, _ = stage_train_classifier(cfg, dev, test)
        with _Stage("train-policy", timings):
            policy, _ = stage_train_policy(cfg, classifier, dev)
        if model_cache is not None:
            model_cache[key] = (classifier, policy)
    else:
        classifier, policy = models
    with _Stage("segment", timings):
        _, threshold = stage_segment(cfg, classifier, policy, dev, test)
    with _Stage("evaluate", timings):
        record = stage_evaluate(cfg, test, threshold, timings)
    write_json(Path(cfg.out) / "timings.json", timings)
    return record


# -- ablations --------------------------------------------------------------

def _point_cfg(cfg, axis, value, seed, out):
    flat = {"seed": seed, "out": str(out), "ablation.axis": "none"}
    if axis == "train_size":
        flat["classifier.n_samples"] = int(value)
    elif axis == "window_size":
        flat["inference.extents"] = list(value)
    elif axis == "rho":
        flat["inference.rho"] = float(value)
    return apply_overrides(cfg, flat)


def _point_dir(root, axis, value, seed):
    label = "x".join(str(int(v)) for v in value) if isinstance(value, (list, tuple)) else str(value)
    return Path(root) / "ablation" / axis / label / f"seed{seed}"


def _trained_models(cfg, seed, root, model_cache=None):
    """Classifier and policy for the rho axis, trained once per seed."""
    base = apply_overrides(cfg, {"seed": seed, "out": str(Path(root) / "ablation" / "rho" / "models" / f"seed{seed}"),
                                 "ablation.axis": "none"})
    key = model_key(base)
    if model_cache is not None and key in model_cache:
        return model_cache[key]
    cases = stage_generate(base)
    split = stage_split(base, cases)
    byid = {c.id: c for c in cases}
    dev, test = [byid[i] for i in split.development], [byid[i] for i in split.test]
    classifier, _ = stage_train_classifier(base, dev, test)
    policy, _ = stage_train_policy(base, classifier, dev)
    if model_cache is not None:
        model_cache[key] = (classifier, policy)
    return classifier, policy


def run_ablation(cfg: ExperimentConfig, values=None, order=None, model_cache=None):
    """Sweep ``cfg.ablation.axis`` over its values and ``cfg.ablation.seeds`` seeds.

    train_size points train and evaluate only the classifier (metric:
    accuracy); window_size points run the full pipeline; rho points reuse
    one trained classifier and policy per seed and rerun inference.  A
    failing point is recorded and the sweep continues.  ``order`` permutes
    execution without changing any result; ``model_cache`` is passed to
    :func:`run_pipeline`.  Returns ``(table, points)``.
    """
    cfg.validate()
    axis = cfg.ablation.axis
    if axis == "none":
        raise ParameterError("run_ablation needs ablation.axis to be set")
    values = list(values if values is not None else cfg.axis_values())
    seeds = [cfg.seed + k for k in range(cfg.ablation.seeds)]
    root = Path(cfg.out)
    jobs = [(v, s) for v in values for s in seeds]
    if order is not None:
        jobs = [jobs[i] for i in order]
    models, caches = {}, {}
    points = {}
    for value, seed in jobs:
        pc = _point_cfg(cfg, axis, value, seed, _point_dir(root, axis, value, seed))
        t0 = time.perf_counter()
        try:
            if axis == "train_size":
                cases = stage_generate(pc)
                split = stage_split(pc, cases)
                byid = {c.id: c for c in cases}
                _, metrics = stage_train_classifier(pc, [byid[i] for i in split.development],
                                                    [byid[i] for i in split.test])
                point = {"metric": metrics.accuracy, "classifier": metrics.to_dict(), "cases": []}
            else:
                if axis == "rho":
                    if seed not in models:
                        models[seed] = _trained_models(cfg, seed, root, model_cache)
                        caches[seed] = ({}, {})
                    record = _rho_point(pc, models[seed], caches[seed])
                else:
                    record = run_pipeline(pc, model_cache=model_cache)
                point = {"metric": record.dice["mean"], "classifier": record.classifier,
                         "cases": record.per_case}
        except SparsError as exc:
            logger.warning("ablation point %s=%s seed %d failed: %s", axis, value, seed, exc)
            point = {"error": str(exc)}
        point["seconds"] = time.perf_counter() - t0
        points[(_key(value), seed)] = point
    table = _ablation_table(axis, values, seeds, points)
    _write_ablation(root, axis, values, seeds, points, table)
    return table, points


def _key(value):
    return tuple(value) if isinstance(value, (list, tuple)) else value


def _rho_point(pc, models, caches):
    cases = stage_generate(pc)
    split = stage_split(pc, cases)
    byid = {c.id: c for c in cases}
    dev, test = [byid[i] for i in split.development], [byid[i] for i in split.test]
    classifier, policy = models
    scorers, prob_cache = caches
    _, threshold = stage_segment(pc, classifier, policy, dev, test, scorers, prob_cache)
    return stage_evaluate(pc, test, threshold)


def _ablation_table(axis, values, seeds, points):
    table = []
    for v in values:
        ok = [points[(_key(v), s)] for s in seeds if "error" not in points[(_key(v), s)]]
        row = {"axis_value": v, "n_seeds": len(ok), "failed": len(seeds) - len(ok),
               "metric": "accuracy" if axis == "train_size" else "dice"}
        if ok:
            per_seed = aggregate(p["metric"] for p in ok)
            row.update(mean=per_seed["mean"], std=per_seed["std"])
            pooled = [c["dice"] for p in ok for c in p["cases"]]
            row["case_std"] = aggregate(pooled)["std"] if pooled else None
        else:
            row.update(mean=None, std=None, case_std=None)
        table.append(row)
    return table


def _write_ablation(root, axis, values, seeds, points, table):
    root = Path(root) / "ablation"
    root.mkdir(parents=True, exist_ok=True)
    write_csv(root / f"{axis}.csv", ["axis_value", "metric", "mean", "std", "case_std", "n_seeds", "failed"],
              [{**r, "axis_value": _axis_label(r["axis_value"])} for r in table])
    rows = [{"axis_value": v, "seed": s, "case_id": c["case_id"], "dice": c["dice"], "miou": c["miou"]}
            for v in values for s in seeds for c in points[(_key(v), s)].get("cases", [])]
    if rows:
        export_metrics(rows, root / f"{axis}_cases")
    failures = [{"axis_value": _axis_label(v), "seed": s, "error": points[(_key(v), s)]["error"]}
                for v in values for s in seeds if "error" in points[(_key(v), s)]]
    write_json(root / f"{axis}_summary.json", {"table": [{**r, "axis_value": _axis_label(r["axis_value"])}
                                                         for r in table], "failures": failures})


def _axis_label(v):
    return "x".join(str(int(x)) for x in v) if isinstance(v, (list, tuple)) else v


def build_report(out):
    """Collect whatever metric files exist under ``out`` into one summary."""
    out = Path(out)
    report = {}
    for name in ("metrics_record.json", "classifier_metrics.json", "threshold.json", "timings.json"):
        path = out / name
        if path.exists():
            report[name[:-5]] = json.loads(path.read_text())
    abl = out / "ablation"
    if abl.exists():
        report["ablation"] = {p.name[:-len("_summary.json")]: json.loads(p.read_text())
                              for p in sorted(abl.glob("*_summary.json"))}
    if not report:
        raise StageError("report", f"no metric files found under {out}")
    report.get("metrics_record", {}).pop("per_case", None)
    write_json(out / "report.json", report)
    return report
