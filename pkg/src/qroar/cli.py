"""Command line entry point: ``qroar {gen-data,diagnose,quantize,search,eval}``.

Exit codes: 0 success, 1 internal error, 2 config error, 3 data or
sample-size error, 4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attention import (AttentionWeights, DevSet, HiddenStates, Objective, make_devset,
                        random_weights, score)
from .config import RunConfig, load_config
from .diagnostics import (bucket_mean, eta_factor, interpolation_pressure, logit_error_bound,
                          phase_deviation, position_buckets, tail_inflation_activation, tail_inflation_weight,
                          tail_quantile)
from .exceptions import ConfigError, DataError, QRoarError
from .io import (FORMAT_VERSION, read_json, read_length_scores, read_qtensor, sha256_file,
                 write_csv, write_json, write_qtensor)
from .quant import QuantMode, QuantSpec, quantize_minmax, spectral_norm
from .rope import rotate
from .search import (BandScales, apply_band_scales, coordinate_search, gamma_bound,
                     partition_bands)

log = logging.getLogger("qroar")


# --- loading -----------------------------------------------------------------

def load_weights(cfg: RunConfig) -> AttentionWeights:
    m = cfg.model
    if m.source == "synthetic":
        return random_weights(m.d_model, m.n_heads, m.d_h, m.rope_base, seed=cfg.seed,
                              column_spread=m.column_spread)
    w_q, _ = read_qtensor(cfg.resolve(m.w_q))
    w_k, _ = read_qtensor(cfg.resolve(m.w_k))
    return AttentionWeights(w_q, w_k, m.n_heads, m.d_h, m.rope_base)


def devset_seed(cfg: RunConfig) -> int:
    return cfg.seed + 1


def _devset_weights(cfg):
    w = cfg.devset.weights
    return None if w is None else {int(k): v for k, v in w.items()}


def load_devset(cfg: RunConfig, d_model: int) -> DevSet:
    dc = cfg.devset
    if not dc.manifest:
        return make_devset(dc.lengths, d_model, seed=devset_seed(cfg),
                           outlier_frac=dc.outlier_frac, outlier_gain=dc.outlier_gain,
                           tail_df=dc.tail_df, weights=_devset_weights(cfg),
                           docs_per_length=dc.docs_per_length,
                           calibration_samples=dc.calibration_samples or None)
    path = cfg.resolve(dc.manifest)
    manifest = read_json(path)
    root = path.parent

    def load(entry):
        f = root / entry["file"]
        if sha256_file(f) != entry["sha256"]:
            raise DataError(f"checksum mismatch for {f}")
        return read_qtensor(f)[0]

    items = [(HiddenStates(load(e)), e["length"]) for e in manifest["items"]]
    cal = manifest.get("calibration") or {}
    short = load(cal["short"]) if "short" in cal else None
    long = load(cal["long"]) if "long" in cal else None
    return DevSet(items, _devset_weights(cfg), short, long)


def build_objective(cfg: RunConfig, weights, scheme, devset) -> Objective:
    oc = cfg.objective
    external = None
    if oc.kind == "external":
        external = read_length_scores(cfg.resolve(oc.external_scores))
    return Objective(oc.kind, weights, scheme, devset, oc.n_queries, external)


def _report_head(cfg: RunConfig, command: str) -> dict:
    return {"format_version": FORMAT_VERSION, "command": command, "seed": cfg.seed,
            "config": cfg.to_dict(), "qroar_version": __version__}


# --- commands ----------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, threads: int = 1) -> Path:
    weights = load_weights(cfg)
    devset = load_devset(cfg, weights.d_model) if cfg.devset.manifest is None else None
    if devset is None:
        raise ConfigError("gen-data generates the dev set; remove devset.manifest")
    out = cfg.out / "data"
    entries = []
    counters = {}
    for h, ell in devset.items:
        doc = counters.get(ell, 0)
        counters[ell] = doc + 1
        name = f"h_{ell}_{doc}.qt"
        write_qtensor(out / name, h.values, name=f"h_{ell}_{doc}")
        entries.append({"length": ell, "doc": doc, "file": name, "dims": list(h.values.shape),
                        "sha256": sha256_file(out / name)})
    calibration = {}
    for key, arr in (("short", devset.short), ("long", devset.long)):
        if arr is not None:
            name = f"calib_{key}.qt"
            write_qtensor(out / name, arr, name=f"calib_{key}")
            calibration[key] = {"file": name, "dims": list(arr.shape),
                                "sha256": sha256_file(out / name)}
    weight_files = {}
    if cfg.model.source == "synthetic":
        for key, arr in (("w_q", weights.w_q), ("w_k", weights.w_k)):
            write_qtensor(out / f"{key}.qt", arr, name=key)
            weight_files[key] = {"file": f"{key}.qt", "sha256": sha256_file(out / f"{key}.qt")}
    manifest = _report_head(cfg, "gen-data")
    manifest.update(items=entries, calibration=calibration, weights=weight_files,
                    lengths=devset.lengths)
    write_json(out / "manifest.json", manifest)
    log.info("wrote %d sequences to %s", len(entries), out)
    return out / "manifest.json"


def _nan_to_none(a):
    return [None if isinstance(v, float) and v != v else v for v in np.asarray(a).ravel().tolist()] \
        if np.ndim(a) <= 1 else [_nan_to_none(r) for r in a]


def _log_positions(D: float, n: int) -> np.ndarray:
    return np.unique(np.round(np.geomspace(1.0, max(D, 1.0), n)))


def diagnostics_report(cfg: RunConfig, threads: int = 1) -> tuple[dict, dict]:
    """Build the diagnostics report and the CSV tables it is flattened into."""
    weights = load_weights(cfg)
    devset = load_devset(cfg, weights.d_model)
    sched = weights.schedule()
    scheme = cfg.build_scheme()
    D0 = scheme.L0 if scheme.L0 is not None else min(devset.lengths)
    D = scheme.L if scheme.L is not None else max(devset.lengths)
    eps = cfg.search.eps
    scales = scheme.scales(sched.n_pairs)

    phase = []
    for i in range(sched.n_pairs):
        phase.append({
            "pair": i, "theta": float(sched.freqs[i]),
            "wavelength": float(sched.wavelengths[i]), "scale": float(scales[i]),
            "deviation_at_D0": float(phase_deviation(scheme, sched, i, D0, D0)),
            "deviation_at_D": float(phase_deviation(scheme, sched, i, D, D0)),
            "pressure": float(interpolation_pressure(scheme, sched, i, D)),
        })

    partition = partition_bands(sched, min(cfg.search.B, sched.n_pairs))
    band_of_col = partition.band_of_pair()[weights.column_pairs]
    h_short, h_long = devset.tail_samples(D0)
    tir = tail_inflation_weight(np.hstack([weights.w_q, weights.w_k]), h_short, h_long, eps,
                                np.concatenate([band_of_col, band_of_col]))

    head = cfg.diagnose.head
    if not 0 <= head < weights.n_heads:
        raise ConfigError(f"diagnose.head must lie in [0, {weights.n_heads})")
    cols = slice(head * weights.d_h, (head + 1) * weights.d_h)
    u_short = (h_short @ weights.w_q[:, cols]).reshape(len(h_short), sched.n_pairs, 2)
    u_long = (h_long @ weights.w_q[:, cols]).reshape(len(h_long), sched.n_pairs, 2)
    positions = _log_positions(D, cfg.diagnose.n_positions)
    rho_a = tail_inflation_activation(u_short, scheme, sched, positions, eps, u_long=u_long)
    clip = tail_quantile(np.abs(u_short).max(axis=-1), 1 - eps)
    act = QuantSpec(bits=cfg.diagnose.activation_bits, group_size=None,
                    mode=QuantMode.MIDRISE, clip=tuple(float(c) for c in clip))
    eta = eta_factor(u_long, scheme, sched, positions, act)
    buckets = position_buckets(positions)

    logit = _logit_bound_stats(cfg, weights, scheme, devset)

    report = _report_head(cfg, "diagnose")
    report.update(
        D=float(D), D0=float(D0), eps=eps, phase=phase,
        bands={"partition": partition.to_dict(),
               "gamma": [gamma_bound(m, partition.omega_min, cfg.search.tau)
                         for m in partition.omega_med],
               "rho_w": tir.rho_w_band.tolist()},
        rho_w={"channels": tir.rho_w.tolist(), "sample_counts": list(tir.sample_counts)},
        rho_a={"head": head, "positions": positions.tolist(), "matrix": rho_a.tolist(),
               "bucketed": _nan_to_none(bucket_mean(rho_a, buckets))},
        eta={"head": head, "bits": act.bits, "clip": list(act.clip),
             "positions": positions.tolist(), "matrix": eta.tolist(),
             "bucketed": _nan_to_none(bucket_mean(eta, buckets))},
        logit_bound=logit,
    )
    width = weights.n_heads * weights.d_h
    tables = {
        "phase.csv": (list(phase[0]), [list(r.values()) for r in phase]),
        "channels.csv": (["matrix", "channel", "head", "pair", "band", "rho_w"],
                         [["w_q" if j < width else "w_k", j % width, (j % width) // weights.d_h,
                           int(weights.column_pairs[j % width]), int(band_of_col[j % width]),
                           float(tir.rho_w[j])] for j in range(2 * width)]),
        "bands.csv": (["band", "pairs", "omega_med", "gamma", "rho_w"],
                      [[b, " ".join(map(str, partition.bands[b])), partition.omega_med[b],
                        report["bands"]["gamma"][b], float(tir.rho_w_band[b])]
                       for b in range(partition.n_bands)]),
    }
    return report, tables


def _logit_bound_stats(cfg, weights, scheme, devset) -> dict:
    n_trials = cfg.diagnose.logit_trials
    if cfg.quant is None:
        return {"trials": 0, "violations": 0}
    ell = max(devset.lengths)
    h = devset.by_length(ell)[0].values[:ell]
    rng = np.random.default_rng(cfg.seed)
    m = rng.integers(0, ell, n_trials)
    n = rng.integers(0, ell, n_trials)
    head = rng.integers(0, weights.n_heads, n_trials)
    sched = scheme.apply(weights.schedule())
    wq = weights.quantized(cfg.quant)
    dh = weights.d_h

    def proj(w, pos):
        full = (h[pos] @ w).reshape(n_trials, weights.n_heads, dh)
        return rotate(full[np.arange(n_trials), head], pos, sched)

    q, k = proj(weights.w_q, m), proj(weights.w_k, n)
    e_q, e_k = proj(wq.w_q, m) - q, proj(wq.w_k, n) - k
    rep = logit_error_bound(q, k, e_q, e_k)
    ratio = np.divide(rep.actual, rep.bound, out=np.zeros_like(rep.bound), where=rep.bound > 0)
    return {"trials": int(n_trials), "length": int(ell),
            "violations": int(np.sum(rep.actual > rep.bound + 1e-9)),
            "mean_actual": float(rep.actual.mean()), "mean_bound": float(rep.bound.mean()),
            "max_ratio": float(ratio.max()),
            "offset_correlation": float(np.corrcoef(np.abs(m - n), rep.actual)[0, 1])}


def cmd_diagnose(cfg: RunConfig, threads: int = 1) -> Path:
    report, tables = diagnostics_report(cfg, threads)
    out = cfg.out / "diagnose"
    for name, (header, rows) in tables.items():
        write_csv(out / name, header, rows)
    return write_json(out / "diagnostics.json", report)


def cmd_quantize(cfg: RunConfig, threads: int = 1) -> Path:
    if cfg.quant is None:
        raise ConfigError("quantize needs a 'quant' section")
    weights = load_weights(cfg)
    out = cfg.out / "quant"
    summary = _report_head(cfg, "quantize")
    for name, w in (("w_q", weights.w_q), ("w_k", weights.w_k)):
        qt = quantize_minmax(w, cfg.quant)
        write_qtensor(out / f"{name}_codes.qt", qt.codes, dtype="i32")
        write_qtensor(out / f"{name}_scales.qt", qt.scales)
        write_qtensor(out / f"{name}_offsets.qt", qt.offsets)
        write_qtensor(out / f"{name}_dequant.qt", qt.reconstructed)
        summary[name] = {
            "shape": list(w.shape), "groups_per_row": int(np.shape(qt.scales)[-1]) if np.ndim(qt.scales) else 1,
            "delta_min": float(np.min(qt.scales)), "delta_max": float(np.max(qt.scales)),
            "delta_mean": float(np.mean(qt.scales)),
            "error_spectral_norm": spectral_norm(qt.error),
            "max_abs_error": float(np.max(np.abs(qt.error))),
            "max_abs_weight": float(np.max(np.abs(w))),
        }
    return write_json(out / "quant_summary.json", summary)


def cmd_search(cfg: RunConfig, threads: int = 1) -> Path:
    weights = load_weights(cfg)
    devset = load_devset(cfg, weights.d_model)
    scheme = cfg.build_scheme()
    partition = partition_bands(weights.schedule(), cfg.search.B)
    objective = build_objective(cfg, weights, scheme, devset)
    scales = coordinate_search(weights, partition, cfg.quant, scheme, objective, devset,
                               cfg.search, threads=threads)
    rescaled = apply_band_scales(weights, partition, scales)
    out = cfg.out / "search"
    write_qtensor(out / "w_q_rescaled.qt", rescaled.w_q)
    write_qtensor(out / "w_k_rescaled.qt", rescaled.w_k)
    doc = _report_head(cfg, "search")
    doc.update(scales.to_dict())
    doc["partition"] = partition.to_dict()
    log.info("J %.6g -> %.6g, g=%s", scales.J_baseline, scales.J_final, scales.g)
    return write_json(out / "band_scales.json", doc)


def cmd_eval(cfg: RunConfig, scales_file=None, threads: int = 1) -> Path:
    weights = load_weights(cfg)
    devset = load_devset(cfg, weights.d_model)
    scheme = cfg.build_scheme()
    objective = build_objective(cfg, weights, scheme, devset)
    J_fp, fp = score(objective, weights, scheme, None, devset, threads)
    J_q, qs = score(objective, weights, scheme, cfg.quant, devset, threads)
    if scales_file:
        scales = BandScales.from_dict(read_json(scales_file))
        partition = partition_bands(weights.schedule(), cfg.search.B)
        if len(scales.g) != partition.n_bands:
            raise ConfigError("scales file does not match the configured band count")
        rescaled = apply_band_scales(weights, partition, scales)
        J_r, rs = score(objective, rescaled, scheme, cfg.quant, devset, threads)
    else:
        J_r, rs = J_q, qs
    rows = [[ell, devset.weights[ell], fp[ell], qs[ell], rs[ell]] for ell in devset.lengths]
    out = cfg.out / "eval"
    write_csv(out / "scores.csv", ["length", "weight", "score_baseline_fp", "score_quant",
                                   "score_quant_rescaled"], rows)
    summary = _report_head(cfg, "eval")
    summary.update(J_baseline_fp=J_fp, J_quant=J_q, J_quant_rescaled=J_r,
                   scales_file=str(scales_file) if scales_file else None,
                   per_length=[dict(zip(["length", "weight", "score_baseline_fp", "score_quant",
                                         "score_quant_rescaled"], r)) for r in rows])
    write_json(out / "eval.json", summary)
    return out / "scores.csv"


# --- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qroar", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("gen-data", "generate synthetic hidden states and a manifest"),
                        ("diagnose", "phase, tail-inflation and logit-error report"),
                        ("quantize", "RTN-quantize W_Q/W_K and summarize the error"),
                        ("search", "search band scales"),
                        ("eval", "per-length score table")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--threads", type=int, default=1, help="worker cap (default 1)")
        if name == "eval":
            p.add_argument("--scales", help="band_scales.json from a search run")
    return parser


def _setup_logging():
    level = os.environ.get("QROAR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output_dir = str(Path(args.out).resolve())
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg.validate_files()
        if args.command == "gen-data":
            path = cmd_gen_data(cfg, args.threads)
        elif args.command == "diagnose":
            path = cmd_diagnose(cfg, args.threads)
        elif args.command == "quantize":
            path = cmd_quantize(cfg, args.threads)
        elif args.command == "search":
            path = cmd_search(cfg, args.threads)
        else:
            path = cmd_eval(cfg, args.scales, args.threads)
    except QRoarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4
    except Exception:
        log.exception("internal error")
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
