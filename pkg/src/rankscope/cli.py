"""Command-line experiment harness.

Every subcommand reads an optional key-value config file (``key = value``
per line, ``#`` comments), applies ``--key value`` overrides, validates the
result against the keys that subcommand understands, echoes the resolved
config into the output directory and writes its artifacts atomically.

Exit codes: 0 success, 2 invalid configuration or inputs, 3 numerical
failure (divergence, ill-conditioned solve, unfit target).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import baselines, datagen, network as nw, rank as rk, training as tr
from .errors import ConfigError, RankscopeError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _floats(text):
    return [float(v) for v in str(text).replace(",", " ").split()]


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    t = str(text).strip().lower()
    return None if t in ("", "none", "full") else int(t)


# key -> (parser, default, help)
DATA_KEYS = {
    "dataset": (str, "lowrank", "lowrank | sshape | curve1d | csv | idx"),
    "data_path": (str, "", "dataset CSV (dataset=csv) or IDX images (dataset=idx)"),
    "labels_path": (str, "", "IDX labels file (dataset=idx)"),
    "d_in": (int, 10, "input dimension (lowrank)"),
    "d_out": (int, 10, "output dimension (lowrank)"),
    "latent_dim": (int, 5, "latent dimension (lowrank)"),
    "k": (int, 2, "true rank (lowrank)"),
    "N": (int, 200, "number of samples"),
    "noise": (float, 0.0, "output noise std (lowrank)"),
    "gen_width": (int, 100, "hidden width of the generator networks (lowrank)"),
    "n_classes": (int, 4, "classes (sshape)"),
    "data_seed": (int, 0, "generator seed"),
}
ARCH_KEYS = {
    "L": (int, 8, "network depth"),
    "width": (int, 40, "hidden width"),
    "a": (float, 0.0, "leaky slope of the nonlinearity"),
    "init_scale": (float, 1.0, "initialization scale"),
}
TRAIN_KEYS = {
    "lam": (float, 0.0, "ridge lambda (objective uses lam / L * ||W||^2)"),
    "lr": (float, 1e-3, "Adam learning rate"),
    "steps": (int, 1000, "Adam steps"),
    "beta1": (float, 0.9, "Adam beta1"),
    "beta2": (float, 0.999, "Adam beta2"),
    "gd_steps": (int, 0, "gradient-descent refinement steps"),
    "gd_lr": (float, 1e-4, "gradient-descent learning rate"),
    "batch": (_opt_int, None, "mini-batch size (none = full batch)"),
    "loss": (str, "auto", "mse | ce | auto (ce for labeled data)"),
    "weight_decay": (str, "decoupled", "decoupled | coupled"),
}
ANALYSIS_KEYS = {
    "probes": (int, 1000, "random domain probes for rank certificates"),
    "rel_tol": (float, 1e-3, "relative tolerance for numerical rank"),
}
COMMON_KEYS = {
    "seed": (int, 0, "seed for initialization, probes and training"),
    "out": (str, "out", "output directory"),
}

COMMAND_KEYS = {
    "gen": {**COMMON_KEYS, **DATA_KEYS},
    "train": {**COMMON_KEYS, **DATA_KEYS, **ARCH_KEYS, **TRAIN_KEYS, **ANALYSIS_KEYS},
    "analyze": {
        **COMMON_KEYS, **DATA_KEYS, **ANALYSIS_KEYS,
        "checkpoint": (str, "", "network checkpoint to analyze"),
    },
    "construct": {
        **COMMON_KEYS,
        "g": (str, "", "checkpoint of the inner map g"),
        "h": (str, "", "checkpoint of the outer map h"),
        "total_L": (int, 0, "depth of the composed network"),
        "domain_lo": (_floats, None, "lower corner of the input box of g"),
        "domain_hi": (_floats, None, "upper corner of the input box of g"),
    },
    "bound": {
        **COMMON_KEYS, **DATA_KEYS,
        "L": (int, 8, "depth for the lower bound"),
        "mode": (str, "auto", "auto | exact | heuristic"),
        "interpolator": (_bool, True, "also build the rank-1 interpolator witness"),
    },
    "krr": {
        **COMMON_KEYS, **DATA_KEYS, **ANALYSIS_KEYS,
        "ridge": (float, 1e-6, "kernel ridge"),
        "length_scale": (float, 0.0, "Gaussian length scale (0 = median distance)"),
        "checkpoint": (str, "", "optional trained network to contrast with"),
    },
    "sweep": {
        **COMMON_KEYS, **DATA_KEYS, **ARCH_KEYS, **TRAIN_KEYS, **ANALYSIS_KEYS,
        "axis": (str, "depth", "depth | lambda | N"),
        "values": (_floats, None, "values of the swept axis"),
        "seeds": (int, 1, "seeds per value"),
        "method": (str, "train", "train | rank1"),
    },
}


# -- config handling ---------------------------------------------------------------

def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def resolve_config(command: str, file_values: dict, overrides: dict) -> dict:
    """Merge defaults, file values and overrides; reject unknown keys."""
    schema = COMMAND_KEYS[command]
    unknown = sorted(set(file_values) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys for '{command}': {', '.join(unknown)}")
    cfg = {k: spec[1] for k, spec in schema.items()}
    for source in (file_values, overrides):
        for key, raw in source.items():
            if raw is None:
                continue
            parse = schema[key][0]
            try:
                cfg[key] = parse(raw) if isinstance(raw, str) else raw
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
    return cfg


def format_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, list):
            v = " ".join(format(x, ".17g") for x in v)
        elif isinstance(v, float):
            v = format(v, ".17g")
        elif v is None:
            v = "none"
        lines.append(f"{key} = {v}\n")
    return "".join(lines)


def _write(out_dir: Path, name: str, text: str) -> Path:
    path = out_dir / name
    nw.atomic_write_text(path, text)
    return path


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in row])
    return buf.getvalue()


# -- shared steps --------------------------------------------------------------------

def load_dataset(cfg: dict) -> datagen.Dataset:
    kind = cfg["dataset"]
    if kind == "lowrank":
        return datagen.synth_lowrank(
            cfg["d_in"], cfg["d_out"], cfg["latent_dim"], cfg["k"], cfg["N"],
            seed=cfg["data_seed"], widths=cfg["gen_width"], noise=cfg["noise"],
        )
    if kind == "sshape":
        per = max(1, cfg["N"] // cfg["n_classes"])
        return datagen.s_shape_classes(cfg["n_classes"], per, seed=cfg["data_seed"])
    if kind == "curve1d":
        return datagen.curve1d_in_plane(cfg["N"], seed=cfg["data_seed"])
    if kind == "csv":
        if not cfg["data_path"]:
            raise ConfigError("dataset=csv needs data_path")
        return datagen.Dataset.from_csv(Path(cfg["data_path"]).read_text())
    if kind == "idx":
        if not cfg["data_path"]:
            raise ConfigError("dataset=idx needs data_path")
        return datagen.load_idx(cfg["data_path"], cfg["labels_path"] or None)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _train_config(cfg: dict, ds: datagen.Dataset) -> tr.TrainConfig:
    loss = cfg["loss"]
    if loss == "auto":
        loss = "ce" if ds.Y is None else "mse"
    return tr.TrainConfig(
        lam=cfg["lam"], lr=cfg["lr"], steps=cfg["steps"], adam_betas=(cfg["beta1"], cfg["beta2"]),
        seed=cfg["seed"], gd_refine_steps=cfg["gd_steps"], gd_lr=cfg["gd_lr"], batch=cfg["batch"],
        loss=loss, weight_decay=cfg["weight_decay"],
    )


def _widths(cfg, ds):
    if cfg["L"] < 1 or cfg["width"] < 1:
        raise ConfigError("L and width must be positive")
    return (ds.d_in,) + (cfg["width"],) * (cfg["L"] - 1) + (ds.d_out,)


def run_training(cfg: dict, ds: datagen.Dataset):
    tcfg = _train_config(cfg, ds)
    p0 = nw.init(_widths(cfg, ds), cfg["a"], seed=cfg["seed"], scale=cfg["init_scale"])
    target = ds.Y if tcfg.loss == "mse" else ds.labels
    if target is None:
        raise ConfigError(f"loss={tcfg.loss} needs {'targets' if tcfg.loss == 'mse' else 'labels'}")
    return tr.train(p0, (ds.X, target), tcfg)


def _report(p, ds, cfg) -> rk.RankReport:
    return rk.certify(p, ds.X, rel_tol=cfg["rel_tol"], n_probes=cfg["probes"], seed=cfg["seed"])


# -- SVG -----------------------------------------------------------------------------

def svg_line_chart(series: dict, title: str, xlabel: str, ylabel: str, log_y: bool = True,
                   size=(480, 320)) -> str:
    """Minimal SVG polyline chart; ``series`` maps names to (x, y) sequences."""
    w, h = size
    ml, mr, mt, mb = 60, 110, 30, 40
    pts = {}
    for name, (xs, ys) in series.items():
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        if log_y:
            ys = np.log10(np.maximum(ys, 1e-16))
        pts[name] = (xs, ys)
    allx = np.concatenate([p[0] for p in pts.values()]) if pts else np.zeros(1)
    ally = np.concatenate([p[1] for p in pts.values()]) if pts else np.zeros(1)
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def sx(v):
        return ml + (v - x0) / (x1 - x0) * (w - ml - mr)

    def sy(v):
        return h - mb - (v - y0) / (y1 - y0) * (h - mt - mb)

    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
               "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{ml}" y1="{h - mb}" x2="{w - mr}" y2="{h - mb}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{h - mb}" stroke="black"/>',
        f'<text x="{(ml + w - mr) / 2:.1f}" y="{h - 8}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>',
        f'<text x="14" y="{(mt + h - mb) / 2:.1f}" font-size="11" transform="rotate(-90 14 {(mt + h - mb) / 2:.1f})"'
        f' text-anchor="middle">{escape(ylabel + (" (log10)" if log_y else ""))}</text>',
        f'<text x="{ml - 4}" y="{sy(y0):.1f}" text-anchor="end" font-size="10">{y0:.3g}</text>',
        f'<text x="{ml - 4}" y="{sy(y1) + 8:.1f}" text-anchor="end" font-size="10">{y1:.3g}</text>',
        f'<text x="{ml}" y="{h - mb + 14}" text-anchor="middle" font-size="10">{x0:.3g}</text>',
        f'<text x="{w - mr}" y="{h - mb + 14}" text-anchor="middle" font-size="10">{x1:.3g}</text>',
    ]
    for i, (name, (xs, ys)) in enumerate(pts.items()):
        color = palette[i % len(palette)]
        coords = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = mt + 14 * i + 8
        out.append(f'<line x1="{w - mr + 8}" y1="{ly}" x2="{w - mr + 24}" y2="{ly}" stroke="{color}"/>')
        out.append(f'<text x="{w - mr + 28}" y="{ly + 4}" font-size="10">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- commands ------------------------------------------------------------------------

def cmd_gen(cfg, out_dir):
    ds = load_dataset(cfg)
    _write(out_dir, "dataset.csv", ds.to_csv())
    return ds


def cmd_train(cfg, out_dir):
    ds = load_dataset(cfg)
    try:
        p, hist = run_training(cfg, ds)
    except tr.DivergenceError as exc:
        if exc.params is not None:
            nw.save_checkpoint(exc.params, out_dir / "last_good.txt")
        if exc.history is not None:
            _write(out_dir, "history.csv", exc.history.to_csv())
        raise
    nw.save_checkpoint(p, out_dir / "checkpoint.txt")
    _write(out_dir, "history.csv", hist.to_csv())
    report = _report(p, ds, cfg)
    _write(out_dir, "report.txt", report.to_text())
    _write(out_dir, "report.csv", report.to_csv())
    return report


def analysis_tables(p, X):
    """Rows for the activation-spectrum, impact and weight-spectrum CSVs."""
    prof = rk.bottleneck_profile(p, X)
    spectra = [(ell, i, float(v)) for ell, s in enumerate(prof.spectra, start=1)
               for i, v in enumerate(s.values, start=1)]
    impact = [(ell, float(v), float(r)) for ell, (v, r) in
              enumerate(zip(prof.nonlinearity_impact, prof.ratios), start=1)]
    weights = [(ell, i, float(v)) for ell, s in enumerate(prof.weight_spectra, start=1)
               for i, v in enumerate(s.values, start=1)]
    return prof, spectra, impact, weights


def cmd_analyze(cfg, out_dir):
    if not cfg["checkpoint"]:
        raise ConfigError("analyze needs checkpoint")
    p = nw.load_checkpoint(cfg["checkpoint"])
    ds = load_dataset(cfg)
    if ds.d_in != p.input_dim:
        raise ConfigError(f"checkpoint expects {p.input_dim} inputs, data has {ds.d_in}")
    report = _report(p, ds, cfg)
    _write(out_dir, "report.txt", report.to_text())
    _write(out_dir, "report.csv", report.to_csv())
    prof, spectra, impact, weights = analysis_tables(p, ds.X)
    _write(out_dir, "spectra.csv", _csv(["layer", "index", "value"], spectra))
    _write(out_dir, "impact.csv", _csv(["layer", "impact", "s2_over_s1"], impact))
    _write(out_dir, "weight_spectra.csv", _csv(["layer", "index", "value"], weights))
    top = 10
    act_series = {f"layer {ell}": (np.arange(1, min(top, len(s)) + 1), s.values[:top] / max(s.top, 1e-300))
                  for ell, s in enumerate(prof.spectra, start=1)}
    _write(out_dir, "spectra.svg", svg_line_chart(act_series, "Activation singular values", "index", "s_i / s_1"))
    w_series = {f"W{ell}": (np.arange(1, min(top, len(s)) + 1), s.values[:top])
                for ell, s in enumerate(prof.weight_spectra, start=1)}
    _write(out_dir, "weight_spectra.svg", svg_line_chart(w_series, "Weight singular values", "index", "s_i"))
    layers = np.arange(1, len(prof.ratios) + 1)
    _write(out_dir, "impact.svg", svg_line_chart(
        {"impact": (layers, prof.nonlinearity_impact), "s2/s1": (layers, prof.ratios)},
        "Nonlinearity impact and s2/s1", "layer", "value"))
    return report


def cmd_construct(cfg, out_dir):
    if not cfg["g"] or not cfg["h"]:
        raise ConfigError("construct needs g and h checkpoints")
    g = nw.load_checkpoint(cfg["g"])
    h = nw.load_checkpoint(cfg["h"])
    box = None
    if cfg["domain_lo"] is not None or cfg["domain_hi"] is not None:
        if cfg["domain_lo"] is None or cfg["domain_hi"] is None:
            raise ConfigError("give both domain_lo and domain_hi")
        box = nw.output_bounds(g, cfg["domain_lo"], cfg["domain_hi"])
    composed, ledger = nw.compose_serial(g, h, cfg["total_L"], domain_box=box)
    nw.save_checkpoint(composed, out_dir / "composed.txt")
    rows = [
        ("g_norm", ledger.g_norm),
        ("identity_layers", ledger.identity_layers),
        ("k", ledger.k),
        ("middle", ledger.middle),
        ("h_norm", ledger.h_norm),
        ("shift_cost", ledger.shift_cost),
        ("total", ledger.total),
        ("closed_form", ledger.closed_form()),
    ]
    _write(out_dir, "ledger.csv", _csv(["term", "value"], rows))
    return ledger


def cmd_bound(cfg, out_dir):
    ds = load_dataset(cfg)
    if ds.Y is None:
        raise ConfigError("bound needs regression targets")
    b = rk.tsp_lower_bound(ds.X, ds.Y, cfg["L"], cfg["mode"])
    header = ["tsp_length", "diameter", "L", "norm_lower_bound", "mode"]
    row = [b.tsp_length, b.diameter, b.L, b.norm_lower_bound, b.mode]
    if cfg["interpolator"]:
        p = rk.rank1_interpolator(ds.X, ds.Y, cfg["L"], seed=cfg["seed"])
        nw.save_checkpoint(p, out_dir / "rank1.txt")
        header += ["interpolator_norm", "interpolator_fit_error"]
        row += [nw.param_norm(p), tr.fit_error(p, ds.X, ds.Y)]
    _write(out_dir, "bound.csv", _csv(header, [row]))
    return b


def cmd_krr(cfg, out_dir):
    ds = load_dataset(cfg)
    if ds.Y is None:
        raise ConfigError("krr needs regression targets")
    kernel = baselines.GaussianKernel(cfg["length_scale"]) if cfg["length_scale"] > 0 else None
    m = baselines.krr_fit(ds.X, ds.Y, kernel, cfg["ridge"])
    box = (ds.X.min(axis=1), ds.X.max(axis=1))
    probes = rk.default_probes(box, ds.X, n=cfg["probes"], seed=cfg["seed"])
    header = ["krr_rank", "min_dims", "length_scale", "ridge"]
    row = [baselines.krr_rank(m, probes, cfg["rel_tol"]), min(ds.d_in, ds.d_out), m.kernel.length_scale, m.ridge]
    if cfg["checkpoint"]:
        p = nw.load_checkpoint(cfg["checkpoint"])
        if p.input_dim != ds.d_in:
            raise ConfigError("checkpoint input dimension does not match the data")
        header.append("network_rank")
        row.append(rk.jacobian_rank(p, probes, cfg["rel_tol"])[0])
    _write(out_dir, "krr.csv", _csv(header, [row]))
    return row


SWEEP_HEADER = ["axis", "value", "seed", "status", "norm_over_L", "jacobian_rank",
                "bottleneck_ratio", "fit_error", "lower_bound", "message"]


def sweep_cell(cfg: dict, axis: str, value: float, seed: int) -> list:
    """One (value, seed) cell; failures come back as a row with a status."""
    cell = dict(cfg)
    cell["seed"] = seed
    cell["data_seed"] = cfg["data_seed"]
    try:
        if axis == "depth":
            cell["L"] = int(value)
        elif axis == "lambda":
            cell["lam"] = float(value)
        elif axis == "N":
            cell["N"] = int(value)
        else:
            raise ConfigError(f"unknown sweep axis {axis!r}")
        ds = load_dataset(cell)
        lower = ""
        if cfg["method"] == "rank1":
            p = rk.rank1_interpolator(ds.X, ds.Y, cell["L"], seed=seed)
            lower = rk.tsp_lower_bound(ds.X, ds.Y, cell["L"]).norm_lower_bound
        elif cfg["method"] == "train":
            p, _ = run_training(cell, ds)
        else:
            raise ConfigError(f"unknown sweep method {cfg['method']!r}")
        report = _report(p, ds, cell)
        err = tr.fit_error(p, ds.X, ds.Y) if ds.Y is not None else float("nan")
        return [axis, float(value), seed, "ok", report.norm_over_L, report.jacobian_rank,
                report.bottleneck_ratio, err, lower, ""]
    except (RankscopeError, ArithmeticError, ValueError) as exc:
        return [axis, float(value), seed, type(exc).__name__, "", "", "", "", "", str(exc)]


def _threads() -> int:
    raw = os.environ.get("RANKSCOPE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"RANKSCOPE_THREADS must be an integer, got {raw!r}") from exc


def cmd_sweep(cfg, out_dir):
    if not cfg["values"]:
        raise ConfigError("sweep needs values")
    if cfg["axis"] not in ("depth", "lambda", "N"):
        raise ConfigError(f"unknown sweep axis {cfg['axis']!r}")
    cells = [(v, cfg["seed"] + s) for v in cfg["values"] for s in range(cfg["seeds"])]
    workers = min(_threads(), len(cells))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(sweep_cell, cfg, cfg["axis"], v, s) for v, s in cells]
            rows = [f.result() for f in futures]
    else:
        rows = [sweep_cell(cfg, cfg["axis"], v, s) for v, s in cells]
    _write(out_dir, "sweep.csv", _csv(SWEEP_HEADER, rows))
    return rows


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "analyze": cmd_analyze,
    "construct": cmd_construct,
    "bound": cmd_bound,
    "krr": cmd_krr,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankscope", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in COMMAND_KEYS.items():
        sp = sub.add_parser(name, help=COMMANDS[name].__doc__ or name)
        sp.add_argument("--config", help="key-value config file")
        for key, (_, default, help_text) in schema.items():
            sp.add_argument(f"--{key}", dest=key, default=None, help=f"{help_text} (default: {default})")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    overrides = {k: getattr(args, k) for k in COMMAND_KEYS[command]}
    try:
        file_values = parse_config_text(Path(args.config).read_text()) if args.config else {}
        cfg = resolve_config(command, file_values, overrides)
        out_dir = Path(cfg["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        _write(out_dir, "config.txt", format_config(cfg))
        result = COMMANDS[command](cfg, out_dir)
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"rankscope {command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RankscopeError, ValueError, OSError) as exc:
        print(f"rankscope {command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if isinstance(result, rk.RankReport):
        print(result.to_text(), end="")
    else:
        print(json.dumps({"command": command, "out": str(out_dir)}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
