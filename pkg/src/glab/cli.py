"""Command line entry point: ``glab train|capture|attack|eval|bench``."""

import argparse
import csv
import hashlib
import io
import math
import os
import platform
import sys
from importlib import metadata

import numpy as np

from . import attack, config, fl, imaging, models, plotting, sprites
from .errors import ConfigurationError, GlabError

TRUTH_LABELS = "labels.csv"


def fmt(v):
    """Round-trippable text for a CSV cell."""
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return "%.17g" % v
    if isinstance(v, (tuple, list)):
        return " ".join(str(x) for x in v)
    if isinstance(v, bool):
        return "1" if v else "0"
    return str(v)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path):
    if not os.path.exists(path):
        raise ConfigurationError(f"missing input {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _versions():
    parts = []
    for pkg in ("glab", "numpy", "scipy", "matplotlib"):
        try:
            parts.append(f"{pkg} {metadata.version(pkg if pkg != 'glab' else 'artifact')}")
        except metadata.PackageNotFoundError:
            parts.append(f"{pkg} unknown")
    parts.append(f"python {platform.python_version()}")
    return ", ".join(parts)


def write_manifest(cfg, command, outputs):
    """Manifest = every config key (so the file is itself a valid config)
    plus commented provenance lines and output hashes."""
    out = cfg["output.dir"]
    v = cfg.values
    lines = [
        "# glab manifest",
        f"# command: {command}",
        f"# config_sha256: {cfg.digest()}",
        f"# versions: {_versions()}",
        f"# seeds: model={v['model.seed']} train={v['train.seed']} capture={v['capture.seed']} "
        f"ncb={v['ncb.seed']} attack={v['attack.seed']}",
    ]
    text = "\n".join(lines) + "\n" + cfg.text()
    for path in outputs:
        text += f"# output {os.path.relpath(path, out)} sha256={_sha256(path)}\n"
    path = os.path.join(out, f"manifest_{command}.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def _ext(channels):
    return "pgm" if channels == 1 else "ppm"


def _paths(cfg):
    out = cfg["output.dir"]
    return {
        "out": out,
        "weights": os.path.join(out, "model.weights"),
        "captures": os.path.join(out, "captures"),
        "truth": os.path.join(out, "truth"),
        "ncb": os.path.join(out, "ncb.weights"),
        "recon": os.path.join(out, "recon"),
    }


def _require(path, hint):
    if not os.path.exists(path):
        raise ConfigurationError(f"missing input {path} (run `glab {hint}` first)")


def build_model(cfg):
    shape = (cfg["data.channels"], cfg["data.height"], cfg["data.width"])
    if cfg["model.kind"] == "linear":
        return models.build_linear_model(shape, cfg["data.class_count"], cfg["model.seed"])
    widths = cfg["model.widths"]
    if len(widths) != 3:
        raise ConfigurationError("model.widths needs three comma-separated integers")
    return models.build_micro_cnn(shape, cfg["data.class_count"], cfg["model.seed"], widths)


# -- subcommands --------------------------------------------------------------------

def cmd_train(cfg):
    p = _paths(cfg)
    os.makedirs(p["out"], exist_ok=True)
    model = build_model(cfg)
    outputs = []
    if cfg["train.count"] > 0:
        data = sprites.generate_sprites(cfg.sprites("train"), cfg["train.seed"])
        model, losses = models.train(model, data.images, data.label_sets, cfg["model.loss"],
                                     epochs=cfg["train.epochs"], lr=cfg["train.lr"],
                                     seed=cfg["train.seed"], batch_size=cfg["train.batch_size"])
        acc = models.accuracy(model, data.images, data.label_sets, cfg["model.loss"])
        loss_csv = os.path.join(p["out"], "train_loss.csv")
        write_csv(loss_csv, ["epoch", "loss"], [(i + 1, l) for i, l in enumerate(losses)])
        outputs.append(loss_csv)
        if cfg["output.figures"]:
            fig = os.path.join(p["out"], "train_loss.png")
            plotting.loss_curve(fig, losses)
            outputs.append(fig)
        print(f"trained on {len(data)} images, final loss {losses[-1]:.6g}, train accuracy {acc:.3f}")
    else:
        print("train.count=0: saving the freshly initialized model")
    models.save_weights(model, p["weights"])
    outputs.insert(0, p["weights"])
    write_manifest(cfg, "train", outputs)


def cmd_capture(cfg):
    p = _paths(cfg)
    _require(p["weights"], "train")
    model = models.load_weights(p["weights"])
    data = sprites.generate_sprites(cfg.sprites("capture"), cfg["capture.seed"])
    if tuple(data.images.shape[1:]) != model.input_shape:
        raise ConfigurationError(f"data shape {data.images.shape[1:]} does not match model {model.input_shape}")
    os.makedirs(p["captures"], exist_ok=True)
    os.makedirs(p["truth"], exist_ok=True)
    ext = _ext(model.input_shape[0])
    outputs = []
    for i, (img, labels) in enumerate(zip(data.images, data.label_sets)):
        cap = fl.client_step(model, img, labels, cfg["model.loss"])
        cpath = os.path.join(p["captures"], f"capture_{i:03d}.bin")
        fl.save_capture(cap, cpath)
        tpath = os.path.join(p["truth"], f"image_{i:03d}.{ext}")
        imaging.write_image(tpath, img)
        outputs += [cpath, tpath]
    lpath = os.path.join(p["truth"], TRUTH_LABELS)
    write_csv(lpath, ["index", "labels"], [(i, labels) for i, labels in enumerate(data.label_sets)])
    outputs.append(lpath)
    write_manifest(cfg, "capture", outputs)
    print(f"captured {len(data)} client updates")


def _captures(p):
    _require(p["captures"], "capture")
    names = sorted(n for n in os.listdir(p["captures"]) if n.endswith(".bin"))
    if not names:
        raise ConfigurationError(f"no capture files in {p['captures']}")
    return [fl.load_capture(os.path.join(p["captures"], n)) for n in names]


def build_label_block(cfg, model, loss_kind):
    """Label block for multi-label inference, built from attacker-side data."""
    mode = cfg["ncb.mode"]
    if mode == "none":
        return None
    if mode == "copy-weights":
        return models.build_ncb(model, "copy-weights")
    aux = sprites.generate_sprites(cfg.sprites("ncb"), cfg["ncb.seed"])
    caps = [fl.client_step(model, img, labels, loss_kind) for img, labels in zip(aux.images, aux.label_sets)]
    return models.build_ncb(model, "train-on-gradients", caps, aux.label_sets,
                            scale=cfg["attack.ncb_scale"], hidden=cfg["ncb.hidden"],
                            epochs=cfg["ncb.epochs"], lr=cfg["ncb.lr"], seed=cfg["ncb.seed"])


ATTACK_HEADER = ["index", "strategy", "labels", "label_method", "final_objective", "restart_index",
                 "failed_restarts", "ca_g_row", "ca_g_col", "ca_t_row", "ca_t_col", "baseline_error",
                 "flags", "nudges", "iterations"]


def run_strategy(cfg, strategy, model=None, caps=None, ncb=None, need_ncb=True):
    p = _paths(cfg)
    if model is None:
        _require(p["weights"], "train")
        model = models.load_weights(p["weights"])
    caps = _captures(p) if caps is None else caps
    acfg = cfg.attack(strategy)
    rows, outputs, traces, recons = [], [], {}, []
    if ncb is None and need_ncb and acfg.strategy == "MGIC":
        ncb = build_label_block(cfg, model, caps[0].loss_kind)
        if ncb is not None:
            models.save_weights(ncb, p["ncb"])
            outputs.append(p["ncb"])
    sdir = os.path.join(p["recon"], acfg.strategy)
    os.makedirs(sdir, exist_ok=True)
    ext = _ext(model.input_shape[0])
    for i, cap in enumerate(caps):
        rep = attack.run_attack(model, ncb if acfg.strategy == "MGIC" else None, cap, acfg)
        rpath = os.path.join(sdir, f"image_{i:03d}.{ext}")
        imaging.write_image(rpath, rep.reconstruction)
        outputs.append(rpath)
        traces[f"#{i}"] = rep.objective_trace
        recons.append(rep.reconstruction)
        rows.append((i, acfg.strategy, rep.labels.labels, rep.labels.method, rep.final_objective,
                     rep.restart_index, rep.failed_restarts, rep.ca_g.row, rep.ca_g.col,
                     rep.ca_t.row, rep.ca_t.col, rep.baseline_error, "|".join(rep.baseline_flags) or "-",
                     rep.nudge_count, acfg.max_iterations))
        print(f"{acfg.strategy} #{i}: labels {rep.labels.labels} objective {rep.final_objective:.6g}")
    apath = os.path.join(p["out"], f"attack_{acfg.strategy}.csv")
    write_csv(apath, ATTACK_HEADER, rows)
    outputs.append(apath)
    if cfg["output.figures"]:
        tfig = os.path.join(p["out"], f"traces_{acfg.strategy}.png")
        plotting.objective_traces(tfig, traces)
        gfig = os.path.join(p["out"], f"recon_{acfg.strategy}.png")
        plotting.image_grid(gfig, [recons[k:k + 10] for k in range(0, len(recons), 10)])
        outputs += [tfig, gfig]
    return outputs, ncb


def cmd_attack(cfg):
    outputs, _ = run_strategy(cfg, None)
    write_manifest(cfg, "attack", outputs)


EVAL_HEADER = ["index", "strategy", "psnr", "ssim", "final_objective", "baseline_error",
               "labels_true", "labels_inferred", "label_set_exact"]


def _truth(p):
    _require(p["truth"], "capture")
    table = read_csv(os.path.join(p["truth"], TRUTH_LABELS))
    return {int(r["index"]): tuple(int(t) for t in r["labels"].split()) for r in table}


def evaluate(cfg, strategy):
    """Join reconstructions with ground truth; the only place truth is read."""
    p = _paths(cfg)
    strategy = strategy.upper()
    rows_in = read_csv(os.path.join(p["out"], f"attack_{strategy}.csv"))
    labels = _truth(p)
    rows, pairs = [], []
    for r in rows_in:
        i = int(r["index"])
        name = [n for n in os.listdir(p["truth"]) if n.startswith(f"image_{i:03d}.")]
        if not name:
            raise ConfigurationError(f"no ground-truth image for index {i}")
        truth = imaging.read_image(os.path.join(p["truth"], name[0]))
        recon = imaging.read_image(os.path.join(p["recon"], strategy, name[0]))
        gt, gr = imaging.to_gray(truth), imaging.to_gray(recon)
        inferred = tuple(int(t) for t in r["labels"].split())
        rows.append((i, strategy, imaging.psnr(gt, gr), imaging.ssim(gt, gr), float(r["final_objective"]),
                     float(r["baseline_error"]), labels[i], inferred, set(inferred) == set(labels[i])))
        pairs.append((truth, recon))
    return rows, pairs


def cmd_eval(cfg):
    strategy = cfg["attack.strategy"]
    rows, pairs = evaluate(cfg, strategy)
    p = _paths(cfg)
    epath = os.path.join(p["out"], f"eval_{strategy.upper()}.csv")
    write_csv(epath, EVAL_HEADER, rows)
    outputs = [epath]
    if cfg["output.figures"]:
        fig = os.path.join(p["out"], f"eval_{strategy.upper()}.png")
        n = min(len(pairs), 10)
        plotting.image_grid(fig, [[t for t, _ in pairs[:n]], [r for _, r in pairs[:n]]],
                            row_titles=["truth", strategy.upper()])
        outputs.append(fig)
    write_manifest(cfg, "eval", outputs)
    ps = np.array([r[2] for r in rows])
    ss = np.array([r[3] for r in rows])
    print(f"{strategy}: mean PSNR {np.mean(ps):.4g} dB, mean SSIM {np.mean(ss):.4g} over {len(rows)} images")


SUMMARY_HEADER = ["strategy", "n", "mean_psnr", "median_psnr", "mean_ssim", "median_ssim",
                  "mean_baseline_error", "median_baseline_error", "label_set_exact_rate"]


def summarize(rows):
    ps = np.array([r[2] for r in rows])
    ss = np.array([r[3] for r in rows])
    be = np.array([r[5] for r in rows])
    ex = np.array([r[8] for r in rows], dtype=np.float64)
    finite = ps[np.isfinite(ps)]
    mean_psnr = float(np.mean(ps)) if len(finite) == len(ps) else math.inf
    return {"n": len(rows), "mean_psnr": mean_psnr, "median_psnr": float(np.median(ps)),
            "mean_ssim": float(np.mean(ss)), "median_ssim": float(np.median(ss)),
            "mean_baseline_error": float(np.mean(be)), "median_baseline_error": float(np.median(be)),
            "label_set_exact_rate": float(np.mean(ex))}


def cmd_bench(cfg):
    p = _paths(cfg)
    _require(p["weights"], "train")
    model = models.load_weights(p["weights"])
    caps = _captures(p)
    outputs, all_rows, summary, ncb = [], [], {}, None
    for strategy in cfg["bench.strategies"]:
        out, ncb = run_strategy(cfg, strategy, model, caps, ncb)
        outputs += out
        rows, _ = evaluate(cfg, strategy)
        all_rows += rows
        summary[strategy.upper()] = summarize(rows)
    bpath = os.path.join(p["out"], "bench.csv")
    write_csv(bpath, EVAL_HEADER, all_rows)
    spath = os.path.join(p["out"], "bench_summary.csv")
    write_csv(spath, SUMMARY_HEADER,
              [(s,) + tuple(v[k] for k in SUMMARY_HEADER[1:]) for s, v in summary.items()])
    outputs += [bpath, spath]
    if cfg["output.figures"]:
        fig = os.path.join(p["out"], "bench.png")
        plotting.strategy_bars(fig, {s: {"ssim": v["mean_ssim"], "psnr": v["median_psnr"]}
                                     for s, v in summary.items()})
        outputs.append(fig)
    write_manifest(cfg, "bench", outputs)
    for s, v in summary.items():
        print(f"{s}: mean SSIM {v['mean_ssim']:.4g}, median PSNR {v['median_psnr']:.4g} dB, "
              f"mean baseline error {v['mean_baseline_error']:.4g}, label sets exact {v['label_set_exact_rate']:.2f}")


COMMANDS = {"train": cmd_train, "capture": cmd_capture, "attack": cmd_attack, "eval": cmd_eval,
            "bench": cmd_bench}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="glab", description="Gradient inversion experiments.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    args = parser.parse_args(argv)
    try:
        cfg = config.load(args.config).apply(args.set)
        COMMANDS[args.command](cfg)
    except GlabError as exc:
        print(f"glab: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"glab: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
