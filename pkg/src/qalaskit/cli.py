"""Batch command-line front end.

Every artifact-producing run writes a manifest next to its primary output
holding the resolved configuration snapshots, input/output paths, seed, tool
version, and wall time; ``qalas rerun`` replays a manifest into a fresh
directory and reproduces the outputs byte for byte.

Exit codes: 0 success, 2 usage (bad flags, missing files), 3 malformed or
incompatible inputs (formats, configs, shapes), 4 numeric failure.  Errors
print one line to standard error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .dictionary import (
    B1Bins,
    DictionaryCache,
    GridSpec,
    generate_dictionary,
    match_volume,
    read_qdict,
    write_qdict,
)
from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    NumericError,
    QalasError,
    ShapeError,
    UsageError,
)
from .metrics import MaskSpec, fluid_mask, linear_regress, nrmse_percent, roi_means
from .phantom import NoiseSpec, SceneSpec, acquire, brain_like_preset, nist_like_preset, render_scene
from .signal_model import SequenceTiming
from .ssl_engine import (
    NetworkConfig,
    TrainConfig,
    infer,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .volume_io import (
    ParameterMaps,
    SignalVolume,
    atomic_write_bytes,
    export_pgm_preview,
    read_qvol,
    resample_b1,
    write_qvol,
)

MAP_NAMES = ("t1", "t2", "pd", "ie")


def _load_json(path: str) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"file not found: {path}")
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"bad JSON in {path}: {e}") from e


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise UsageError(f"file not found: {path}")
    return path


def _parse_noise(text: str, seed: int) -> dict:
    if text == "none":
        return {"model": "none", "sigma": 0.0, "seed": seed}
    try:
        model, sigma = text.split(":")
        return {"model": model, "sigma": float(sigma), "seed": seed}
    except ValueError as e:
        raise UsageError(f"noise must be none or model:sigma, got {text!r}") from e


def _parse_window(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
        return lo, hi
    except ValueError as e:
        raise UsageError(f"window must be lo:hi, got {text!r}") from e


def _write_csv(path: str, header: str, rows: list[str]) -> None:
    atomic_write_bytes(path, ("\n".join([header] + rows) + "\n").encode())


# --- subcommand handlers ----------------------------------------------------
#
# Each handler consumes a plain dict of fully resolved arguments (config file
# contents inlined) so a manifest can replay it verbatim, and returns the
# mapping of output names to paths.

def run_phantom(args: dict) -> dict:
    scene = SceneSpec.from_dict(args["scene"])
    out_dir = args["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    maps, labels, b1 = render_scene(scene)
    outputs = {
        "scene": os.path.join(out_dir, "scene.json"),
        "truth": os.path.join(out_dir, "truth.qvol"),
        "labels": os.path.join(out_dir, "labels.qvol"),
        "b1": os.path.join(out_dir, "b1.qvol"),
    }
    atomic_write_bytes(outputs["scene"], (scene.to_json() + "\n").encode())
    write_qvol(maps.to_volume(), outputs["truth"])
    write_qvol(
        SignalVolume(labels[None].astype(np.float64), ("labels",), disk_dtype="uint8"),
        outputs["labels"],
    )
    write_qvol(SignalVolume(b1[None], ("b1",)), outputs["b1"])
    return outputs


def run_simulate(args: dict) -> dict:
    maps = ParameterMaps.from_volume(read_qvol(_require(args["maps"])))
    b1 = read_qvol(_require(args["b1"])).data[0]
    timing = SequenceTiming.from_dict(args["timing"])
    if b1.shape != maps.shape:
        nz, ny, nx = maps.shape
        b1 = resample_b1(b1, (nx, ny, nz))
    volume = acquire(maps, b1, timing, NoiseSpec(**args["noise"]))
    write_qvol(volume, args["out"])
    return {"volume": args["out"]}


def run_dict_build(args: dict) -> dict:
    timing = SequenceTiming.from_dict(args["timing"])
    spec = GridSpec.from_dict(args["grid"])
    d = generate_dictionary(timing, spec, args["b1"])
    write_qdict(d, args["out"])
    return {"dictionary": args["out"]}


def _disk_backed_provider(dict_dir: str):
    """Sub-dictionaries persisted per (timing fingerprint, bin); cache misses
    are generated, written, and read back so matching always sees the same
    32-bit-rounded atoms regardless of cache state."""
    os.makedirs(dict_dir, exist_ok=True)

    def provider(timing, spec, bin_index, b1_center):
        path = os.path.join(dict_dir, f"{timing.fingerprint()}_bin{bin_index:03d}.qdict")
        if not os.path.exists(path):
            write_qdict(generate_dictionary(timing, spec, b1_center), path)
        return read_qdict(path)

    return provider


def run_dict_match(args: dict) -> dict:
    volume = read_qvol(_require(args["volume"]))
    timing = SequenceTiming.from_dict(args["timing"])
    spec = GridSpec.from_dict(args["grid"])
    bins = B1Bins(n_bins=args["b1_bins"])
    provider = _disk_backed_provider(args["dict_dir"]) if args.get("dict_dir") else None
    maps = match_volume(
        volume, timing, spec, bins=bins, subdict_provider=provider, threads=args["threads"]
    )
    write_qvol(maps.to_volume(volume.voxel_size_mm), args["out"])
    return {"maps": args["out"]}


def _train_common(args: dict, initial=None) -> dict:
    volume = read_qvol(_require(args["volume"]))
    timing = SequenceTiming.from_dict(args["timing"])
    net_config = NetworkConfig.from_dict(args["net"])
    train_config = TrainConfig.from_dict(args["train"])
    weights, history = train(volume, timing, net_config, train_config, initial_weights=initial)
    out = args["out"]
    best_out = args.get("best_out") or out[: -len(".qnet")] + ".best.qnet"
    history_out = args.get("history_out") or os.path.join(os.path.dirname(out) or ".", "history.csv")
    save_checkpoint(weights, out)
    save_checkpoint(history.best_weights, best_out)
    history.to_csv(history_out)
    return {"checkpoint": out, "best_checkpoint": best_out, "history": history_out}


def run_train(args: dict) -> dict:
    return _train_common(args)


def run_finetune(args: dict) -> dict:
    initial = load_checkpoint(_require(args["init"]))
    return _train_common(args, initial=initial)


def run_infer(args: dict) -> dict:
    volume = read_qvol(_require(args["volume"]))
    weights = load_checkpoint(_require(args["checkpoint"]))
    net_config = NetworkConfig.from_dict(args["net"]) if args.get("net") else None
    maps, elapsed = infer(weights, volume, net_config)
    write_qvol(maps.to_volume(volume.voxel_size_mm), args["out"])
    print(f"inference: {volume.n_voxels} voxels in {elapsed:.2f} s")
    return {"maps": args["out"]}


def _read_maps_and_labels(args: dict):
    est = ParameterMaps.from_volume(read_qvol(_require(args["est"])))
    ref = ParameterMaps.from_volume(read_qvol(_require(args["ref"])))
    labels = None
    if args.get("labels"):
        labels = read_qvol(_require(args["labels"])).data[0].astype(np.uint8)
    return est, ref, labels


def run_eval_regress(args: dict) -> dict:
    est, ref, labels = _read_maps_and_labels(args)
    if labels is None:
        raise UsageError("eval regress needs --labels for the ROI definitions")
    out_dir = args["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    stats_rows, reg_rows = [], []
    for name in MAP_NAMES:
        est_map = getattr(est, "t1_ms" if name == "t1" else "t2_ms" if name == "t2" else name)
        ref_map = getattr(ref, "t1_ms" if name == "t1" else "t2_ms" if name == "t2" else name)
        est_stats = roi_means(est_map, labels)
        ref_stats = roi_means(ref_map, labels)
        pairs = [(r, e) for r, e in zip(ref_stats, est_stats) if r.count > 0]
        for r, e in pairs:
            stats_rows.append(
                f"{name},{r.label},{r.count},{e.mean!r},{e.std!r},{r.mean!r},{r.std!r}"
            )
        fit = linear_regress([r.mean for r, _ in pairs], [e.mean for _, e in pairs])
        reg_rows.append(f"{name},{fit.slope!r},{fit.intercept!r},{fit.r_squared!r},{fit.n}")
    outputs = {
        "roi_stats": os.path.join(out_dir, "roi_stats.csv"),
        "regression": os.path.join(out_dir, "regression.csv"),
    }
    _write_csv(outputs["roi_stats"], "map,label,count,est_mean,est_std,ref_mean,ref_std", stats_rows)
    _write_csv(outputs["regression"], "map,slope,intercept,r_squared,n", reg_rows)
    return outputs


def run_eval_nrmse(args: dict) -> dict:
    est, ref, labels = _read_maps_and_labels(args)
    out_dir = args["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    base = labels > 0 if labels is not None else np.ones(ref.shape, dtype=bool)
    mask = fluid_mask(ref.t1_ms, base, MaskSpec(fluid_t1_ms=args["fluid_t1"]))
    rows = []
    for name in MAP_NAMES:
        est_map = getattr(est, "t1_ms" if name == "t1" else "t2_ms" if name == "t2" else name)
        ref_map = getattr(ref, "t1_ms" if name == "t1" else "t2_ms" if name == "t2" else name)
        rows.append(f"{name},{nrmse_percent(est_map, ref_map, mask)!r},{int(mask.sum())}")
    out = {"nrmse": os.path.join(out_dir, "nrmse.csv")}
    _write_csv(out["nrmse"], "map,nrmse_percent,n_voxels", rows)
    return out


def run_preview(args: dict) -> dict:
    volume = read_qvol(_require(args["volume"]))
    if args["channel"] not in volume.channel_names:
        raise UsageError(
            f"channel {args['channel']!r} not in volume (has {', '.join(volume.channel_names)})"
        )
    c = volume.channel_names.index(args["channel"])
    z = args["z"]
    if not 0 <= z < volume.data.shape[1]:
        raise UsageError(f"slice {z} out of range")
    export_pgm_preview(volume.data[c, z], args["window"], args["out"])
    return {"preview": args["out"]}


HANDLERS = {
    "phantom": run_phantom,
    "simulate": run_simulate,
    "dict-build": run_dict_build,
    "dict-match": run_dict_match,
    "train": run_train,
    "finetune": run_finetune,
    "infer": run_infer,
    "eval-regress": run_eval_regress,
    "eval-nrmse": run_eval_nrmse,
    "preview": run_preview,
}

# args keys that name paths the handler writes (remapped by rerun)
OUTPUT_KEYS = {
    "phantom": ("out_dir",),
    "simulate": ("out",),
    "dict-build": ("out",),
    "dict-match": ("out", "dict_dir"),
    "train": ("out", "best_out", "history_out"),
    "finetune": ("out", "best_out", "history_out"),
    "infer": ("out",),
    "eval-regress": ("out_dir",),
    "eval-nrmse": ("out_dir",),
    "preview": ("out",),
}


def _manifest_path(outputs: dict, subcommand: str) -> str:
    first = next(iter(outputs.values()))
    d = first if os.path.isdir(first) else (os.path.dirname(first) or ".")
    return os.path.join(d, f"{subcommand}.manifest.json")


def execute(subcommand: str, args: dict, write_manifest: bool = True) -> dict:
    """Run one resolved subcommand; returns its outputs mapping."""
    t0 = time.perf_counter()
    outputs = HANDLERS[subcommand](args)
    if write_manifest:
        manifest = {
            "subcommand": subcommand,
            "tool_version": __version__,
            "args": args,
            "outputs": outputs,
            "seed": args.get("seed"),
            "wall_time_s": time.perf_counter() - t0,
        }
        atomic_write_bytes(
            _manifest_path(outputs, subcommand), (json.dumps(manifest, indent=1) + "\n").encode()
        )
    return outputs


def run_rerun(manifest_path: str, out_dir: str) -> dict:
    manifest = _load_json(_require(manifest_path))
    sub = manifest.get("subcommand")
    if sub not in HANDLERS:
        raise FormatError(f"manifest names unknown subcommand {sub!r}")
    args = dict(manifest["args"])
    os.makedirs(out_dir, exist_ok=True)
    for key in OUTPUT_KEYS[sub]:
        if key in args and args[key]:
            args[key] = (
                out_dir if key == "out_dir" else os.path.join(out_dir, os.path.basename(args[key]))
            )
    return execute(sub, args)


# --- argument parsing ---------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="qalas",
        description="Multiparametric T1/T2/PD/IE mapping from five-contrast QALAS volumes.",
    )
    p.add_argument("--version", action="version", version=f"qalas {__version__}")
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("phantom", help="render a synthetic scene to truth maps, labels, and B1")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset", choices=["nist-like", "brain-like"])
    g.add_argument("--scene", help="scene description JSON")
    sp.add_argument("--dims", help="override preset dims as NX,NY,NZ")
    sp.add_argument("-o", "--out-dir", required=True)

    sp = sub.add_parser("simulate", help="acquire a volume from truth maps through the signal model")
    sp.add_argument("--maps", required=True)
    sp.add_argument("--b1", required=True)
    sp.add_argument("--timing", help="timing JSON (defaults when omitted)")
    sp.add_argument("--noise", default="none", help="none | gaussian:SIGMA | rician:SIGMA")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("-o", "--out", required=True)

    dp = sub.add_parser("dict", help="dictionary engine")
    dsub = dp.add_subparsers(dest="dict_cmd", required=True)
    sp = dsub.add_parser("build", help="simulate one sub-dictionary at a fixed B1")
    sp.add_argument("--timing")
    sp.add_argument("--grid", help="grid segments JSON (paper defaults when omitted)")
    sp.add_argument("--b1", type=float, default=1.0)
    sp.add_argument("-o", "--out", required=True)
    sp = dsub.add_parser("match", help="match a volume voxel by voxel")
    sp.add_argument("--in", dest="volume", required=True)
    sp.add_argument("--timing")
    sp.add_argument("--grid")
    sp.add_argument("--dict-dir", help="directory caching per-bin sub-dictionaries")
    sp.add_argument("--b1-bins", type=int, default=100)
    sp.add_argument("--threads", type=int, default=None)
    sp.add_argument("-o", "--out", required=True)

    for name, needs_init in (("train", False), ("finetune", True)):
        sp = sub.add_parser(name, help=f"{name} the self-supervised engine on one volume")
        sp.add_argument("--in", dest="volume", required=True)
        sp.add_argument("--timing")
        sp.add_argument("--net", help="network config JSON")
        sp.add_argument("--train", dest="train_cfg", help="training config JSON")
        sp.add_argument("--seed", type=int, help="override the training seed")
        if needs_init:
            sp.add_argument("--init", required=True, help="checkpoint to start from")
        sp.add_argument("-o", "--out", required=True)
        sp.add_argument("--best-out")
        sp.add_argument("--history-out")

    sp = sub.add_parser("infer", help="reconstruct maps with a trained checkpoint")
    sp.add_argument("--in", dest="volume", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--net", help="expected network config (fingerprint check)")
    sp.add_argument("-o", "--out", required=True)

    ep = sub.add_parser("eval", help="evaluation metrics")
    esub = ep.add_subparsers(dest="eval_cmd", required=True)
    sp = esub.add_parser("regress", help="ROI-mean regression of estimated vs reference maps")
    sp.add_argument("--est", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("-o", "--out-dir", required=True)
    sp = esub.add_parser("nrmse", help="masked percent-NRMSE with fluid exclusion")
    sp.add_argument("--est", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--labels")
    sp.add_argument("--fluid-t1", type=float, default=3000.0)
    sp.add_argument("-o", "--out-dir", required=True)

    sp = sub.add_parser("preview", help="export an 8-bit PGM preview of one map slice")
    sp.add_argument("--in", dest="volume", required=True)
    sp.add_argument("--channel", required=True)
    sp.add_argument("--z", type=int, default=0)
    sp.add_argument("--window", required=True, help="LO:HI")
    sp.add_argument("-o", "--out", required=True)

    sp = sub.add_parser("rerun", help="replay a manifest into a fresh directory")
    sp.add_argument("manifest")
    sp.add_argument("--out-dir", required=True)
    return p


def _parse_dims(text: str) -> tuple[int, int, int]:
    try:
        nx, ny, nz = (int(v) for v in text.split(","))
        return nx, ny, nz
    except ValueError as e:
        raise UsageError(f"dims must be NX,NY,NZ, got {text!r}") from e


def _timing_dict(path: str | None) -> dict:
    return _load_json(path) if path else SequenceTiming().to_dict()


def _resolve(ns: argparse.Namespace) -> tuple[str, dict]:
    """Turn parsed flags into a manifest-ready args dict (configs inlined)."""
    threads_env = os.environ.get("QALAS_THREADS")
    if ns.cmd == "phantom":
        if ns.preset:
            dims = _parse_dims(ns.dims) if ns.dims else None
            presets = {"nist-like": nist_like_preset, "brain-like": brain_like_preset}
            scene = presets[ns.preset](dims) if dims else presets[ns.preset]()
        else:
            scene = SceneSpec.from_dict(_load_json(ns.scene))
        return "phantom", {"scene": scene.to_dict(), "out_dir": ns.out_dir}
    if ns.cmd == "simulate":
        return "simulate", {
            "maps": ns.maps,
            "b1": ns.b1,
            "timing": _timing_dict(ns.timing),
            "noise": _parse_noise(ns.noise, ns.seed),
            "seed": ns.seed,
            "out": ns.out,
        }
    if ns.cmd == "dict":
        grid = _load_json(ns.grid) if ns.grid else GridSpec().to_dict()
        if ns.dict_cmd == "build":
            return "dict-build", {
                "timing": _timing_dict(ns.timing),
                "grid": grid,
                "b1": ns.b1,
                "out": ns.out,
            }
        threads = ns.threads if ns.threads else int(threads_env) if threads_env else 1
        return "dict-match", {
            "volume": ns.volume,
            "timing": _timing_dict(ns.timing),
            "grid": grid,
            "dict_dir": ns.dict_dir,
            "b1_bins": ns.b1_bins,
            "threads": threads,
            "out": ns.out,
        }
    if ns.cmd in ("train", "finetune"):
        train_cfg = TrainConfig.from_dict(_load_json(ns.train_cfg)) if ns.train_cfg else TrainConfig()
        if ns.seed is not None:
            train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": ns.seed})
        args = {
            "volume": ns.volume,
            "timing": _timing_dict(ns.timing),
            "net": _load_json(ns.net) if ns.net else NetworkConfig().to_dict(),
            "train": train_cfg.to_dict(),
            "seed": train_cfg.seed,
            "out": ns.out,
            "best_out": ns.best_out,
            "history_out": ns.history_out,
        }
        if ns.cmd == "finetune":
            args["init"] = ns.init
        return ns.cmd, args
    if ns.cmd == "infer":
        return "infer", {
            "volume": ns.volume,
            "checkpoint": ns.ckpt,
            "net": _load_json(ns.net) if ns.net else None,
            "out": ns.out,
        }
    if ns.cmd == "eval":
        if ns.eval_cmd == "regress":
            return "eval-regress", {
                "est": ns.est,
                "ref": ns.ref,
                "labels": ns.labels,
                "out_dir": ns.out_dir,
            }
        return "eval-nrmse", {
            "est": ns.est,
            "ref": ns.ref,
            "labels": ns.labels,
            "fluid_t1": ns.fluid_t1,
            "out_dir": ns.out_dir,
        }
    if ns.cmd == "preview":
        return "preview", {
            "volume": ns.volume,
            "channel": ns.channel,
            "z": ns.z,
            "window": list(_parse_window(ns.window)),
            "out": ns.out,
        }
    raise UsageError(f"unknown command {ns.cmd!r}")


_EXIT_CODES = (
    (UsageError, 2),
    ((FormatError, ConfigError, ShapeError, DomainError), 3),
    (NumericError, 4),
)


def main(argv=None) -> int:
    ns = _build_parser().parse_args(argv)
    try:
        if ns.cmd == "rerun":
            run_rerun(ns.manifest, ns.out_dir)
        else:
            execute(*_resolve(ns))
        return 0
    except QalasError as e:
        for types, code in _EXIT_CODES:
            if isinstance(e, types):
                print(f"qalas: error: {e}", file=sys.stderr)
                return code
        print(f"qalas: error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
