"""Command-line pipeline driver.

Each command resolves one config (defaults, file, flag overrides), runs one
stage, and appends a run manifest to its output directory so the run can be
reproduced from (config hash, seed). Exit codes: 0 success, 2 usage or
configuration problems, 3 data problems, 4 numeric or training failures.
"""

from __future__ import annotations

import json
import os
import sys
import time
from pathlib import Path

import click
import numpy as np
import torch

from eqmark import evalharness as ev
from eqmark import metrics as mx
from eqmark import training as tr
from eqmark.config import load_config
from eqmark.data import (generate_synthetic, load_directory_dataset,
                         sample_coord_map, save_dataset)
from eqmark.errors import (ConfigurationError, DataError, NumericError,
                           SamplingError, TrainingError)
from eqmark.netarch import (LAYER_NAMES, build_feature_extractor,
                            build_landmark_head, compute_taps,
                            load_checkpoint, load_params_into)

OUT_ROOT_ENV = "EQMARK_OUT_ROOT"


def _default_out(command):
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return Path(root) / command


def _fail(message, code):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn, **kwargs):
    try:
        return fn(**kwargs)
    except (ConfigurationError, ValueError) as exc:
        _fail(str(exc), 2)
    except (DataError, SamplingError) as exc:
        _fail(str(exc), 3)
    except (NumericError, TrainingError) as exc:
        _fail(str(exc), 4)


def _write_manifest(out_dir, command, config_path, cfg, seed, started,
                    overrides=None):
    record = {"command": command,
              "config": str(config_path) if config_path else "defaults",
              "config_hash": cfg.hash(),
              "seed": seed,
              "out": str(out_dir),
              "overrides": overrides or {},
              "started": started,
              "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}
    with open(Path(out_dir) / "manifest.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _load_splits(cfg):
    if cfg.data_root is not None:
        res = (cfg.data.height, cfg.data.width)
        return {split: load_directory_dataset(cfg.data_root,
                                              layout=cfg.data_layout,
                                              split=split, resolution=res)
                for split in ("train", "val", "test")}
    return generate_synthetic(cfg.data)


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _strip_wall_time(rows):
    return [{k: v for k, v in row.items() if k != "wall_time"}
            for row in rows]


def _training_report_files(out_dir, stage, cfg, train_cfg, report):
    payload = {"stage": stage,
               "config_hash": cfg.hash(),
               "train_config_hash": tr.config_hash(train_cfg),
               "seed": train_cfg.seed,
               # basename keeps reports byte-identical across output dirs
               "checkpoint": Path(report.checkpoint).name
               if report.checkpoint else "",
               "epochs": _strip_wall_time(report.epochs),
               "extra": {k: v for k, v in report.extra.items()}}
    _write_json(Path(out_dir) / "report.json", payload)


@click.group()
def main():
    """Unsupervised landmark discovery pipeline."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="YAML config; defaults are used when omitted.")
@click.option("--n", "n_train", type=int, default=None,
              help="Override the number of training images.")
@click.option("--seed", type=int, default=None,
              help="Override the dataset seed.")
@click.option("--out", type=click.Path(), default=None,
              help="Output directory (default $EQMARK_OUT_ROOT/synth).")
def synth(config_path, n_train, seed, out):
    """Generate the synthetic dataset and write it to disk."""
    def run():
        started = time.strftime("%Y-%m-%dT%H:%M:%S")
        cfg = load_config(config_path)
        spec = cfg.data
        changes = {}
        if n_train is not None:
            changes["n_train"] = n_train
        if seed is not None:
            changes["seed"] = seed
        if changes:
            d = spec.to_dict()
            d.update(changes)
            from eqmark.data import DatasetSpec
            spec = DatasetSpec(**{**d, "landmark_names":
                                  tuple(d["landmark_names"])})
        out_dir = Path(out) if out else _default_out("synth")
        out_dir.mkdir(parents=True, exist_ok=True)
        splits = generate_synthetic(spec)
        save_dataset(splits, out_dir / "dataset", spec=spec)
        counts = {k: len(v) for k, v in splits.items()}
        _write_manifest(out_dir, "synth", config_path, cfg, spec.seed,
                        started, overrides=changes)
        click.echo(f"dataset written to {out_dir / 'dataset'} "
                   f"(train={counts['train']} val={counts['val']} "
                   f"test={counts['test']})")
    _guarded(run)


def _train_command(stage, config_path, seed, out, epochs, lr, k_landmarks,
                   features=None):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    cfg = load_config(config_path)
    overrides = {"epochs": epochs, "lr": lr, "seed": seed,
                 "k_landmarks": k_landmarks}
    train_cfg = cfg.train_config(stage, **overrides)
    out_dir = Path(out) if out else _default_out(stage)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = _load_splits(cfg)
    stem = {"pretrain": "features", "landmark": "landmark",
            "end2end": "end2end"}[stage]
    ck_path = out_dir / f"{stem}.npz"
    log_path = out_dir / "train_log.jsonl"
    if log_path.exists():
        log_path.unlink()  # logs describe exactly this run
    if stage == "pretrain":
        _, report = tr.pretrain_features(train_cfg, splits["train"],
                                         out_path=ck_path, log_path=log_path)
    elif stage == "landmark":
        _, _, report = tr.train_landmarks(train_cfg, splits["train"],
                                          features, out_path=ck_path,
                                          log_path=log_path,
                                          val_dataset=splits["val"])
    else:
        _, _, report = tr.train_end_to_end(train_cfg, splits["train"],
                                           out_path=ck_path,
                                           log_path=log_path,
                                           val_dataset=splits["val"])
    _training_report_files(out_dir, stage, cfg, train_cfg, report)
    _write_manifest(out_dir, stage, config_path, cfg, train_cfg.seed, started,
                    overrides={k: v for k, v in overrides.items()
                               if v is not None})
    click.echo(f"checkpoint written to {ck_path}")


def _stage_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(),
                      default=None)(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--out", type=click.Path(), default=None)(fn)
    fn = click.option("--epochs", type=int, default=None)(fn)
    fn = click.option("--lr", type=float, default=None)(fn)
    return fn


@main.command()
@_stage_options
def pretrain(config_path, seed, out, epochs, lr):
    """Step 1: contrastive pretraining of the feature extractor."""
    _guarded(_train_command, stage="pretrain", config_path=config_path,
             seed=seed, out=out, epochs=epochs, lr=lr, k_landmarks=None)


@main.command()
@_stage_options
@click.option("--features", type=click.Path(exists=False), required=True,
              help="Pretrained feature checkpoint (step 1 output).")
@click.option("--k-landmarks", type=int, default=None,
              help="Override the number of discovered landmarks.")
def train(config_path, seed, out, epochs, lr, features, k_landmarks):
    """Step 2: landmark training on top of frozen features."""
    _guarded(_train_command, stage="landmark", config_path=config_path,
             seed=seed, out=out, epochs=epochs, lr=lr,
             k_landmarks=k_landmarks, features=features)


@main.command()
@_stage_options
@click.option("--k-landmarks", type=int, default=None,
              help="Override the number of discovered landmarks.")
def e2e(config_path, seed, out, epochs, lr, k_landmarks):
    """End-to-end baseline: same architecture and losses, no pretraining."""
    _guarded(_train_command, stage="end2end", config_path=config_path,
             seed=seed, out=out, epochs=epochs, lr=lr,
             k_landmarks=k_landmarks)


def _tap_feature_fn(ck_path, layer):
    if layer not in LAYER_NAMES:
        raise ConfigurationError(
            f"unknown layer tap {layer!r}; valid taps: {', '.join(LAYER_NAMES)}")
    manifest, params = load_checkpoint(ck_path)
    from eqmark.netarch import ModelConfig
    model_cfg = ModelConfig.from_dict(manifest["model_config"])
    f_net = build_feature_extractor(model_cfg)
    load_params_into(f_net, params, prefix="f.")
    f_net.eval()
    t_net = None
    if manifest["kind"] == "landmark":
        t_net = build_landmark_head(model_cfg)
        load_params_into(t_net, params, prefix="t.")
        t_net.eval()
    elif layer != "layer1":
        raise ConfigurationError(
            "a features checkpoint exposes layer1 only; deeper taps "
            "need a landmark checkpoint")

    def feature_fn(image):
        x = tr.images_to_tensor([image])
        with torch.no_grad():
            if t_net is None:
                return f_net(x)[0].numpy()
            return compute_taps(f_net, t_net, x)[layer][0].numpy()

    return feature_fn


@main.command(name="acc-curve")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--layer", default="layer1", show_default=True,
              help="Feature tap to evaluate (layer1..layer4).")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def acc_curve(config_path, checkpoint, layer, seed, out):
    """Feature matching accuracy curve against the random baseline."""
    def run():
        started = time.strftime("%Y-%m-%dT%H:%M:%S")
        cfg = load_config(config_path)
        eval_seed = cfg.seed if seed is None else seed
        out_dir = Path(out) if out else _default_out("acc-curve")
        out_dir.mkdir(parents=True, exist_ok=True)
        feature_fn = _tap_feature_fn(checkpoint, layer)
        splits = _load_splits(cfg)
        aug = cfg.eval.aug

        def deform_fn(domain, ex_seed):
            return sample_coord_map(aug, domain, np.random.default_rng(ex_seed))

        domain = cfg.data.domain
        thresholds = cfg.eval.curve_thresholds
        res = mx.evaluate_matches(splits["test"], feature_fn, deform_fn,
                                  domain, seed=eval_seed)
        curve = mx.curve_from_distances(res.distances, thresholds,
                                        res.n_excluded)
        rnd = mx.random_baseline_curve(res.targets, domain, thresholds,
                                       seed=eval_seed)
        header = [f"config_hash={cfg.hash()}", f"seed={eval_seed}",
                  f"layer={layer}", f"checkpoint={Path(checkpoint).name}"]
        mx.save_curve(curve, out_dir / f"curve_{layer}.txt", header)
        mx.save_curve(rnd, out_dir / "curve_random.txt", header)
        mx.plot_curves({layer: curve, "random": rnd},
                       out_dir / "curves.png")
        _write_manifest(out_dir, "acc-curve", config_path, cfg, eval_seed,
                        started, overrides={"layer": layer,
                                            "checkpoint": str(checkpoint)})
        click.echo(f"curves written to {out_dir}")
    _guarded(run)


def _resolve_sizes(sizes, pool):
    out = []
    for s in sizes:
        if isinstance(s, str):
            if s != "full":
                raise ConfigurationError(
                    f"sweep sizes must be integers or 'full', got {s!r}")
            out.append(pool)
        else:
            out.append(int(s))
    return out


@main.command(name="eval")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--checkpoint", type=click.Path(), required=True,
              help="Landmark checkpoint (two-step or end-to-end).")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--sweep/--no-sweep", default=True, show_default=True,
              help="Also run the sample-efficiency sweep.")
def eval_cmd(config_path, checkpoint, seed, out, sweep):
    """Fit the linear readout on the validation split and score the test split."""
    def run():
        started = time.strftime("%Y-%m-%dT%H:%M:%S")
        cfg = load_config(config_path)
        eval_seed = cfg.seed if seed is None else seed
        out_dir = Path(out) if out else _default_out("eval")
        out_dir.mkdir(parents=True, exist_ok=True)
        splits = _load_splits(cfg)
        es = cfg.eval
        fit = ev.fit_readout_on_dataset(str(checkpoint), splits["val"],
                                        alpha=es.alpha, train_id="val")
        rows = []
        for metric in ("pck", "iod-mse"):
            rep = ev.evaluate_readout(fit, str(checkpoint), splits["test"],
                                      metric=metric, threshold=es.threshold,
                                      eye_indices=es.eye_indices,
                                      config_hash=cfg.hash())
            rows.append({"row": metric, **rep.to_dict()})
        if sweep:
            sizes = _resolve_sizes(es.sweep_sizes, len(splits["val"]))
            sweep_rows = ev.sample_efficiency_sweep(
                str(checkpoint), splits["val"], splits["test"], sizes,
                repeats=es.sweep_repeats, seed=eval_seed, alpha=es.alpha,
                metric="iod-mse", threshold=es.threshold,
                eye_indices=es.eye_indices)
            rows += [{"row": "sweep", "metric": "iod-mse", **r}
                     for r in sweep_rows]
        payload = {"checkpoint": Path(checkpoint).name,
                   "config_hash": cfg.hash(), "seed": eval_seed,
                   "reference_results": list(mx.REFERENCE_RESULTS),
                   "reference_note": mx.REFERENCE_NOTE,
                   "rows": rows}
        _write_json(out_dir / "report.json", payload)
        lines = [f"# config_hash={cfg.hash()} seed={eval_seed}"]
        for r in rows:
            if r["row"] == "sweep":
                lines.append(f"sweep size={r['size']:>4} "
                             f"iod-mse={r['mean']:.4f} +- {r['std']:.4f}")
            else:
                lines.append(f"{r['row']}: {r['mean']:.4f}")
        (out_dir / "report.txt").write_text("\n".join(lines) + "\n")
        _write_manifest(out_dir, "eval", config_path, cfg, eval_seed, started,
                        overrides={"checkpoint": str(checkpoint)})
        click.echo("\n".join(lines))
    _guarded(run)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--two-step", "two_step", type=click.Path(), required=True,
              help="Landmark checkpoint from the two-step recipe.")
@click.option("--end2end", "end2end_ck", type=click.Path(), required=True,
              help="Landmark checkpoint from the end-to-end recipe.")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def ablate(config_path, two_step, end2end_ck, seed, out):
    """Side-by-side table and final-prediction accuracy curves."""
    def run():
        started = time.strftime("%Y-%m-%dT%H:%M:%S")
        cfg = load_config(config_path)
        eval_seed = cfg.seed if seed is None else seed
        out_dir = Path(out) if out else _default_out("ablate")
        out_dir.mkdir(parents=True, exist_ok=True)
        splits = _load_splits(cfg)
        es = cfg.eval
        report = ev.ablation_report(
            {"two-step": str(two_step), "end-to-end": str(end2end_ck)},
            splits["val"], splits["test"], alpha=es.alpha,
            threshold=es.threshold, eye_indices=es.eye_indices,
            curve_thresholds=es.curve_thresholds, config_hash=cfg.hash())
        table = ev.ablation_table_text(report)
        payload = {"config_hash": cfg.hash(), "seed": eval_seed,
                   "rows": report["rows"],
                   "reference_results": list(mx.REFERENCE_RESULTS),
                   "reference_note": mx.REFERENCE_NOTE}
        _write_json(out_dir / "ablation.json", payload)
        (out_dir / "ablation.txt").write_text(
            f"# config_hash={cfg.hash()} seed={eval_seed}\n" + table)
        header = [f"config_hash={cfg.hash()}", f"seed={eval_seed}"]
        for label, curve in report["curves"].items():
            safe = label.replace("-", "_")
            mx.save_curve(curve, out_dir / f"curve_{safe}.txt",
                          header + [f"arm={label}"])
        mx.plot_curves(report["curves"], out_dir / "ablation_curves.png",
                       title="final prediction accuracy")
        _write_manifest(out_dir, "ablate", config_path, cfg, eval_seed,
                        started, overrides={"two_step": str(two_step),
                                            "end2end": str(end2end_ck)})
        click.echo(table)
    _guarded(run)


if __name__ == "__main__":
    main()
