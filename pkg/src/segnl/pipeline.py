"""Experiment stages: generate -> pseudolabel -> train -> evaluate.

Every stage writes into its own directory under the run's output dir and
leaves a ``stamp.json`` holding the digest of the config sections it
depends on. A stage whose stamp matches is reused unless ``force`` is set.
"""

import json
import logging
import os
import shutil
from dataclasses import replace

import numpy as np

from segnl import metrics, report
from segnl.nn.checkpoint import load_checkpoint, save_checkpoint
from segnl.nn.optim import Adam
from segnl.nn.train import SliceSet, TrainingError, TrainState, read_log_csv, train, write_log_csv
from segnl.nn.unet import UNetModel, predict_volume, segment_binary, volume_to_slices
from segnl.phantom import Subject, generate_cohort, load_manifest, write_json
from segnl.preprocess import preprocess_subject
from segnl.rng import substream
from segnl.volume_io import LabelMap, read_labelmap, read_nifti, write_labelmap
from segnl.watershed import pseudo_label

log = logging.getLogger(__name__)

SELECTORS = ("left", "right", "both")


class StageError(RuntimeError):
    """A stage cannot run because an upstream artifact is missing or stale."""


# -- layout -------------------------------------------------------------------

def stage_dir(config, stage):
    if stage == "generate":
        return config.cohort_dir
    return os.path.join(config.output_dir, {"pseudolabel": "pseudolabels", "train": "model",
                                            "evaluate": "eval"}[stage])


def _stamp_path(config, stage):
    return os.path.join(stage_dir(config, stage), "stamp.json")


def is_current(config, stage):
    try:
        with open(_stamp_path(config, stage)) as fh:
            stamp = json.load(fh)
    except (OSError, ValueError):
        return False
    return stamp.get("hash") == config.stage_hash(stage)


def _write_stamp(config, stage):
    write_json({"stage": stage, "hash": config.stage_hash(stage)}, _stamp_path(config, stage))


def _fresh_dir(path):
    if os.path.isdir(path):
        shutil.rmtree(path)
    os.makedirs(path)


def _require(config, stage):
    if not is_current(config, stage):
        raise StageError(f"stage {stage!r} has no up-to-date output in {stage_dir(config, stage)}; run it first")


# -- loading ------------------------------------------------------------------

def manifest_path(config):
    return os.path.join(config.cohort_dir, "manifest.json")


def load_subject(config, entry, with_truth=True):
    root = config.cohort_dir
    paths = entry["paths"]
    truth = read_labelmap(os.path.join(root, paths["truth"])) if with_truth else None
    return Subject(
        entry["id"],
        read_nifti(os.path.join(root, paths["t1"])),
        read_nifti(os.path.join(root, paths["flair"])),
        truth,
    )


def load_pseudolabels(config):
    d = stage_dir(config, "pseudolabel")
    with open(os.path.join(d, "summary.json")) as fh:
        summary = json.load(fh)
    failed = {f["id"] for f in summary["failed"]}
    labels = {}
    for s in summary["subjects"]:
        if s["id"] not in failed:
            labels[s["id"]] = read_labelmap(os.path.join(d, f"{s['id']}.nii"))
    return labels, summary


# -- stages -------------------------------------------------------------------

def run_generate(config, force=False):
    """Write the phantom cohort; returns the manifest path."""
    if not force and is_current(config, "generate") and os.path.exists(manifest_path(config)):
        log.info("cohort up to date in %s", config.cohort_dir)
        return manifest_path(config)
    # files are overwritten in place; data_dir may be a user directory
    c = config.cohort
    path = generate_cohort(config.phantom, c.n_train, c.n_val, c.n_test, config.cohort_dir)
    _write_stamp(config, "generate")
    return path


def run_pseudolabel(config, force=False):
    """Watershed pseudo-labels for every subject plus a summary with the failure list."""
    _require(config, "generate")
    out = stage_dir(config, "pseudolabel")
    if not force and is_current(config, "pseudolabel"):
        log.info("pseudo-labels up to date in %s", out)
        return load_pseudolabels(config)[1]
    _fresh_dir(out)
    manifest = load_manifest(manifest_path(config))
    rows, failed = [], []
    for entry in manifest["subjects"]:
        subject = load_subject(config, entry)
        res = pseudo_label(subject, config.watershed, entry["index"])
        row = {"id": entry["id"], "split": entry["split"], "status": res.status}
        if res.failed:
            failed.append({"id": entry["id"], "split": entry["split"], "error": res.error})
            log.warning("pseudo-label failed for %s: %s", entry["id"], res.error)
        else:
            write_labelmap(res.labelmap, os.path.join(out, f"{entry['id']}.nii"))
            row["dsc"] = res.dsc
            row["normalization_divisor"] = res.normalization_divisor
            row["seeds"] = {"left": list(res.seeds.left), "right": list(res.seeds.right),
                            "midline": res.seeds.midline}
        rows.append(row)
    ok = [r["dsc"]["both"] for r in rows if "dsc" in r]
    summary = {
        "subjects": rows,
        "failed": failed,
        "mean_dsc_both": float(np.mean(ok)) if ok else None,
    }
    write_json(summary, os.path.join(out, "summary.json"))
    _write_stamp(config, "pseudolabel")
    return summary


def subject_channels(subject):
    """Preprocessed ``[channel1, channel2]`` arrays and the brain mask."""
    ch1, ch2, mask = preprocess_subject(subject)
    return [ch1.data, ch2.data], mask


def build_slices(config, split, labels, manifest):
    """Axial training slices of every non-failed subject in ``split``."""
    xs, ys = [], []
    for entry in manifest["subjects"]:
        if entry["split"] != split or entry["id"] not in labels:
            continue
        channels, _ = subject_channels(load_subject(config, entry, with_truth=False))
        xs.append(volume_to_slices(channels))
        ys.append(labels[entry["id"]].data.transpose(2, 0, 1))
    if not xs:
        raise TrainingError(f"no usable subjects in split {split!r}")
    return SliceSet(np.concatenate(xs), np.ascontiguousarray(np.concatenate(ys), dtype=np.intp))


def _resume_hash(config):
    # resuming may extend the number of epochs but nothing else
    return replace(config, train=replace(config.train, epochs=1)).stage_hash("train")


def run_train(config, force=False, resume=False):
    """Train on pseudo-labels; writes best.ckpt, last.ckpt and train_log.csv."""
    _require(config, "pseudolabel")
    out = stage_dir(config, "train")
    last_path = os.path.join(out, "last.ckpt")
    best_path = os.path.join(out, "best.ckpt")
    log_path = os.path.join(out, "train_log.csv")
    if not force and not resume and is_current(config, "train"):
        log.info("model up to date in %s", out)
        return best_path

    labels, _ = load_pseudolabels(config)
    manifest = load_manifest(manifest_path(config))
    train_set = build_slices(config, "train", labels, manifest)
    val_set = build_slices(config, "val", labels, manifest)
    tc = config.train

    state = None
    if resume and os.path.exists(last_path):
        model, optimizer, extra = load_checkpoint(last_path)
        if extra.get("train_hash") != _resume_hash(config):
            raise StageError(f"{last_path} was written under a different config; rerun without --resume")
        optimizer.beta1, optimizer.beta2, optimizer.eps = tc.beta1, tc.beta2, tc.eps
        best_model, _, best_extra = load_checkpoint(best_path)
        rows = [r for r in read_log_csv(log_path) if r["epoch"] <= model.epoch]
        state = TrainState(model, optimizer, model.epoch, rows, best_model, best_extra["val_loss"])
        log.info("resuming at epoch %d", model.epoch + 1)
    else:
        _fresh_dir(out)
        model = UNetModel.build(config.unet, substream(config.seed, "init"))
        state = TrainState(model, Adam(tc.beta1, tc.beta2, tc.eps))

    train_hash = _resume_hash(config)

    def on_epoch(st):
        row = st.log[-1]
        if row["val_loss"] == st.best_val and st.best_model.epoch == st.epoch:
            save_checkpoint(best_path, st.best_model, extra={"val_loss": st.best_val, "train_hash": train_hash})
        save_checkpoint(last_path, st.model, st.optimizer, extra={"best_val": st.best_val, "train_hash": train_hash})
        write_log_csv(st.log, log_path)

    train(state.model, train_set, val_set, tc, state=state, on_epoch=on_epoch)
    _write_stamp(config, "train")
    return best_path


def _score(refs, preds):
    return {sel: metrics.dsc_pooled(refs, preds, sel) for sel in SELECTORS}


def run_evaluate(config, force=False):
    """Score watershed and network on the test split; returns the report dict."""
    _require(config, "train")
    out = stage_dir(config, "evaluate")
    report_path = os.path.join(out, "report.json")
    if not force and is_current(config, "evaluate") and os.path.exists(report_path):
        log.info("evaluation up to date in %s", out)
        with open(report_path) as fh:
            return json.load(fh)
    _fresh_dir(out)
    os.makedirs(os.path.join(out, "predictions"))
    mc = config.metrics
    labels, _ = load_pseudolabels(config)
    manifest = load_manifest(manifest_path(config))
    model, _, _ = load_checkpoint(os.path.join(stage_dir(config, "train"), "best.ckpt"))

    refs, ws_preds, net_preds, probs, masks, subjects = [], [], [], [], [], []
    for entry in manifest["subjects"]:
        if entry["split"] != "test":
            continue
        subject = load_subject(config, entry)
        channels, mask = subject_channels(subject)
        p = predict_volume(model, channels)
        pred = segment_binary(p, mc.threshold).data
        pred[~mask] = 0
        net = LabelMap(pred, subject.truth.spacing, subject.truth.orientation)
        write_labelmap(net, os.path.join(out, "predictions", f"{entry['id']}.nii"))
        # a failed watershed run counts as an empty segmentation
        ws = labels.get(entry["id"], LabelMap(np.zeros(subject.truth.dims, dtype=np.uint8)))
        refs.append(subject.truth)
        ws_preds.append(ws)
        net_preds.append(net)
        probs.append(p)
        masks.append(mask)
        subjects.append({
            "id": entry["id"],
            "watershed_failed": entry["id"] not in labels,
            "dsc_watershed": {s: metrics.dsc_per_subject(subject.truth, ws, s) for s in SELECTORS},
            "dsc_network": {s: metrics.dsc_per_subject(subject.truth, net, s) for s in SELECTORS},
        })

    pooled_ws, pooled_net = _score(refs, ws_preds), _score(refs, net_preds)
    statistic = {"mean": np.mean, "median": np.median}[mc.bootstrap_statistic]
    rocs, aucs, pvals = {}, {}, {}
    for sel in SELECTORS:
        rocs[sel] = metrics.roc_curve(probs, refs, sel, masks, mc.n_thresholds)
        aucs[sel] = metrics.auc(rocs[sel])
        a = [s["dsc_network"][sel] for s in subjects]
        b = [s["dsc_watershed"][sel] for s in subjects]
        # share of resamples in which the watershed beats the network
        pvals[sel] = metrics.bootstrap_pvalue(a, b, mc.n_bootstraps, substream(config.seed, "bootstrap"), statistic)
    fpr, tpr = metrics.roc_point_single(ws_preds, refs, "both", masks)

    margins = {sel: pooled_net[sel] - pooled_ws[sel] for sel in SELECTORS}
    result = {
        "version": 1,
        "config_hash": config.stage_hash("evaluate"),
        "checkpoint_epoch": int(model.epoch),
        "subjects": subjects,
        "pooled_dsc": {"watershed": pooled_ws, "network": pooled_net},
        "roc": {"selector": "both", "points": rocs["both"].tolist()},
        "auc": aucs,
        "watershed_point": {"fpr": fpr, "tpr": tpr},
        "bootstrap_pvalue": pvals,
        "n_bootstraps": mc.n_bootstraps,
        "bootstrap_statistic": mc.bootstrap_statistic,
        "table": report.table(pooled_ws, pooled_net, aucs),
        "comparison": {
            "margin": margins,
            "required_margin": mc.margin,
            "alpha": mc.alpha,
            "network_better": {sel: margins[sel] > 0 for sel in SELECTORS},
            "passed": {sel: bool(margins[sel] >= mc.margin and pvals[sel] < mc.alpha) for sel in SELECTORS},
        },
    }
    report.write_report(result, report_path)
    report.write_roc_csv(rocs["both"], os.path.join(out, "roc.csv"))
    report.write_svg(report.roc_svg(rocs["both"], (fpr, tpr), aucs["both"]), os.path.join(out, "roc.svg"))
    _write_stamp(config, "evaluate")
    return result


def run_experiment(config, force=False):
    run_generate(config, force)
    run_pseudolabel(config, force)
    run_train(config, force)
    return run_evaluate(config, force)
