"""Command-line front end: quantize, calibrate, evaluate, report, bench.

Every subcommand is deterministic given its config and seed: the same
invocation produces byte-identical artifacts.  Exit codes: 0 success,
2 configuration/input error, 3 numerical failure during calibration.

A JSON config file may supply any DiTConfig or CalibConfig field plus the
quantization plan; a command-line flag with the same name always wins.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import calib, dit, kernel, modelio, reports, vq

CACHE_ENV = "VQKIT_CACHE_DIR"

# named presets: effective 2 and 3 bits/weight
PRESETS = {"2bit": (4, 256), "3bit": (2, 64)}

_DIT_FIELDS = ("depth", "d_in", "heads", "n_tok", "classes", "timesteps", "cfg_scale")
_CALIB_FIELDS = (
    "lambda_d",
    "lambda_r",
    "lambda_freeze",
    "lr_ratio",
    "lr_codebook",
    "batch",
    "iters",
    "n",
    "mode",
    "seed",
    "tune_extras",
)


class CliError(Exception):
    """Bad configuration or input; exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    """Resolved description of one pipeline invocation."""

    model: str
    dit: dit.DiTConfig
    plan: Dict[str, vq.LayerShape]
    calib: calib.CalibConfig
    seed: int
    outputs: Dict[str, str]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "%.10g" % v
    return str(v)


def _say(line: str) -> None:
    print(line)


# ---------------------------------------------------------------------------
# config file handling


def _load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError("cannot read config file %s: %s" % (path, exc))
    if not isinstance(raw, dict):
        raise CliError("config file must hold a JSON object")
    allowed = {"seed", "dit", "calib", "plan"}
    unknown = set(raw) - allowed
    if unknown:
        raise CliError("unknown config sections: %s" % ", ".join(sorted(unknown)))
    return raw


def _merge_section(defaults: dict, section: dict, args, fields) -> dict:
    """defaults <- config file <- flags (same field names)."""
    merged = dict(defaults)
    unknown = set(section) - set(fields)
    if unknown:
        raise CliError("unknown config fields: %s" % ", ".join(sorted(unknown)))
    merged.update(section)
    for f in fields:
        v = getattr(args, f, None)
        if v is not None:
            merged[f] = v
    return merged


def _dit_config_from(args, file_cfg: dict, base: Optional[dit.DiTConfig] = None) -> dit.DiTConfig:
    defaults = base.to_dict() if base is not None else dict(
        depth=2, d_in=64, heads=4, n_tok=16, classes=10, timesteps=10, cfg_scale=1.0
    )
    merged = _merge_section(defaults, file_cfg.get("dit", {}), args, _DIT_FIELDS)
    try:
        return dit.DiTConfig.from_dict(merged)
    except (ValueError, TypeError) as exc:
        raise CliError("invalid model config: %s" % exc)


def _calib_config_from(args, file_cfg: dict) -> calib.CalibConfig:
    defaults = {f.name: f.default for f in dataclasses.fields(calib.CalibConfig)}
    merged = _merge_section(defaults, file_cfg.get("calib", {}), args, _CALIB_FIELDS)
    try:
        return calib.CalibConfig(**merged)
    except (ValueError, TypeError) as exc:
        raise CliError("invalid calibration config: %s" % exc)


def _seed_from(args, file_cfg: dict, default: int = 0) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(file_cfg.get("seed", default))


# ---------------------------------------------------------------------------
# model files


def _save_model(path: str, params: Dict[str, np.ndarray], config: dit.DiTConfig, seed: int) -> None:
    meta = {
        "kind": "dit-model",
        "config": json.dumps(config.to_dict(), sort_keys=True),
        "seed": str(seed),
    }
    modelio.write_container_file(path, params, meta)


def _load_model(path: str) -> Tuple[Dict[str, np.ndarray], dit.DiTConfig]:
    box = modelio.read_container_file(path)
    meta = box.metadata
    if meta.get("kind") != "dit-model":
        raise CliError("%s is not a model file (kind=%r)" % (path, meta.get("kind")))
    try:
        config = dit.DiTConfig.from_dict(json.loads(meta["config"]))
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CliError("model config in %s is invalid: %s" % (path, exc))
    expected = set(dit.init_params(config, seed=0))
    got = set(box.tensors)
    if expected != got:
        missing = sorted(expected - got)[:4]
        extra = sorted(got - expected)[:4]
        raise CliError(
            "model tensors do not match config (missing %s, unexpected %s)" % (missing, extra)
        )
    return dict(box.tensors), config


# ---------------------------------------------------------------------------
# quantization plan


def _parse_bits_plan(bits: float, d: int) -> int:
    exp = bits * d
    if abs(exp - round(exp)) > 1e-9:
        raise CliError("bit-width %g with d=%d needs a fractional codebook" % (bits, d))
    exp = int(round(exp))
    if not 1 <= exp <= 16:
        raise CliError("bit-width %g with d=%d gives k=2^%d outside [2, 65536]" % (bits, d, exp))
    return 1 << exp


def _resolve_plan(
    params: Dict[str, np.ndarray],
    names: List[str],
    args,
    file_cfg: dict,
) -> Dict[str, vq.LayerShape]:
    plan_cfg = dict(file_cfg.get("plan", {}))
    layer_over = plan_cfg.pop("layers", {})
    unknown = set(plan_cfg) - {"preset", "d", "k", "bits"}
    if unknown:
        raise CliError("unknown plan fields: %s" % ", ".join(sorted(unknown)))

    preset = args.preset if args.preset is not None else plan_cfg.get("preset")
    d = args.d if args.d is not None else plan_cfg.get("d")
    k = args.k if args.k is not None else plan_cfg.get("k")
    bits = args.bits if args.bits is not None else plan_cfg.get("bits")

    if preset is not None:
        if preset not in PRESETS:
            raise CliError("unknown preset %r (choose from %s)" % (preset, sorted(PRESETS)))
        pd, pk = PRESETS[preset]
        d = pd if d is None else d
        k = pk if k is None else k
    if d is None:
        raise CliError("no sub-vector length: give --preset, or --d with --k or --bits")
    if k is None and bits is not None:
        k = _parse_bits_plan(float(bits), int(d))
    if k is None:
        raise CliError("no codebook size: give --k, --bits, or a preset")

    unknown_layers = set(layer_over) - set(names)
    if unknown_layers:
        raise CliError("plan overrides for unknown layers: %s" % ", ".join(sorted(unknown_layers)))

    plan: Dict[str, vq.LayerShape] = {}
    problems = []
    for name in names:
        ld, lk = int(d), int(k)
        over = layer_over.get(name, {})
        if over:
            bad = set(over) - {"d", "k", "bits"}
            if bad:
                problems.append("%s: unknown plan keys %s" % (name, sorted(bad)))
                continue
            ld = int(over.get("d", ld))
            if "k" in over:
                lk = int(over["k"])
            elif "bits" in over:
                try:
                    lk = _parse_bits_plan(float(over["bits"]), ld)
                except CliError as exc:
                    problems.append("%s: %s" % (name, exc))
                    continue
        o, i = params[name].shape
        try:
            shape = vq.LayerShape(o=o, i=i, d=ld, k=lk)
        except ValueError as exc:
            problems.append("%s: %s" % (name, exc))
            continue
        if lk > shape.num_subvectors:
            problems.append(
                "%s: k=%d exceeds the %d sub-vectors available" % (name, lk, shape.num_subvectors)
            )
            continue
        plan[name] = shape
    if problems:
        raise CliError("invalid quantization plan:\n  " + "\n  ".join(problems))
    return plan


def _build_states(
    params: Dict[str, np.ndarray],
    plan: Dict[str, vq.LayerShape],
    n: int,
    seed: int,
) -> Dict[str, calib.LayerState]:
    states: Dict[str, calib.LayerState] = {}
    for idx, name in enumerate(sorted(plan)):
        shape = plan[name]
        if not 1 <= n <= shape.k:
            raise CliError("%s: candidate count n=%d outside [1, k=%d]" % (name, n, shape.k))
        sub = vq.split_subvectors(params[name], shape.d)
        km = vq.kmeans(sub, shape.k, seed=seed + idx)
        cand = vq.build_candidates(sub, km.codebook, n)
        states[name] = calib.LayerState(
            name=name, shape=shape, codebook=km.codebook.copy(), cand=cand
        )
    return states


# ---------------------------------------------------------------------------
# sidecar: candidate sets + logits that travel next to a quantized file


def _write_sidecar(path: str, states: Dict[str, calib.LayerState], config_echo: dict) -> None:
    tensors = {}
    for name, st in states.items():
        # candidate indices are < 2**16, exactly representable in float32
        tensors[name + ":candidates"] = st.cand.candidates.astype("<f4")
        tensors[name + ":logits"] = st.cand.logits
    meta = {
        "kind": "candidate-sidecar",
        "n": str(next(iter(states.values())).cand.n if states else 0),
        "config": json.dumps(config_echo, sort_keys=True),
    }
    modelio.write_container_file(path, tensors, meta)


def _read_sidecar(path: str) -> Tuple[Dict[str, vq.CandidateSet], dict]:
    box = modelio.read_container_file(path)
    if box.metadata.get("kind") != "candidate-sidecar":
        raise CliError("%s is not a candidate sidecar" % path)
    grouped: Dict[str, dict] = {}
    for key, arr in box.tensors.items():
        name, _, part = key.rpartition(":")
        if part not in ("candidates", "logits") or not name:
            raise CliError("unexpected sidecar tensor %r" % key)
        grouped.setdefault(name, {})[part] = arr
    out: Dict[str, vq.CandidateSet] = {}
    for name, parts in sorted(grouped.items()):
        if set(parts) != {"candidates", "logits"}:
            raise CliError("sidecar entry %s is incomplete" % name)
        cand = np.rint(parts["candidates"]).astype(np.int64)
        out[name] = vq.CandidateSet(candidates=cand, logits=parts["logits"].astype(np.float32))
    try:
        echo = json.loads(box.metadata.get("config", "{}"))
    except json.JSONDecodeError:
        echo = {}
    return out, echo


# ---------------------------------------------------------------------------
# trajectory cache (optionally persisted under $VQKIT_CACHE_DIR)


def _cache_file(tag: str, model_path: str, config: dit.DiTConfig, num: int, seed: int) -> Optional[str]:
    root = os.environ.get(CACHE_ENV)
    if not root:
        return None
    h = hashlib.sha256()
    with open(model_path, "rb") as fh:
        h.update(fh.read())
    h.update(json.dumps([tag, config.to_dict(), num, seed], sort_keys=True).encode())
    return os.path.join(root, "traj-%s.bin" % h.hexdigest()[:20])


def _get_cache(
    fp_params: Dict[str, np.ndarray],
    config: dit.DiTConfig,
    num: int,
    seed: int,
    tag: str,
    model_path: str,
) -> calib.TrajectoryCache:
    path = _cache_file(tag, model_path, config, num, seed)
    if path is not None and os.path.exists(path):
        cache = calib.load_cache(path)
        if cache.config == config and cache.size == num:
            return cache
    cache = calib.build_cache(fp_params, config, num_trajectories=num, seed=seed)
    if path is not None:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        calib.save_cache(path, cache)
    return cache


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_toy_model(args) -> int:
    file_cfg = _load_config_file(args.config)
    config = _dit_config_from(args, file_cfg)
    seed = _seed_from(args, file_cfg)
    params = dit.init_params(config, seed=seed)
    _save_model(args.out, params, config, seed)
    count = sum(int(v.size) for v in params.values())
    _say("model,%s" % args.out)
    _say("parameters,%d" % count)
    _say("quantizable_layers,%d" % len(dit.quantizable_layer_names(config)))
    return 0


def _storage_stats(
    params: Dict[str, np.ndarray], states: Dict[str, calib.LayerState]
) -> List[dict]:
    stats = []
    total_err = 0.0
    total_n = 0
    total_cb = 0.0
    total_as = 0.0
    for name in sorted(states):
        st = states[name]
        rep = vq.storage_report(st.shape)
        hard = st.hard_weight()
        err = float(np.sum((params[name].astype(np.float64) - hard) ** 2))
        cnt = hard.size
        stats.append(
            {
                "name": name,
                "k": st.shape.k,
                "d": st.shape.d,
                "codebook_mb": rep["codebook_bits"] / 8e6,
                "assignment_mb": rep["assignment_bits"] / 8e6,
                "bits": rep["effective_bits_per_weight"],
                "mse": err / cnt,
            }
        )
        total_err += err
        total_n += cnt
        total_cb += rep["codebook_bits"]
        total_as += rep["assignment_bits"]
    if total_n:
        # codebook storage stays in its own column, as in the per-layer rows
        stats.append(
            {
                "name": "TOTAL",
                "k": 0,
                "d": 0,
                "codebook_mb": total_cb / 8e6,
                "assignment_mb": total_as / 8e6,
                "bits": total_as / total_n,
                "mse": total_err / total_n,
            }
        )
    return stats


def _quant_config_echo(config: dit.DiTConfig, plan: Dict[str, vq.LayerShape], n: int, seed: int) -> dict:
    return {
        "dit": config.to_dict(),
        "quant": {
            "n": n,
            "seed": seed,
            "plan": {name: [plan[name].k, plan[name].d] for name in sorted(plan)},
        },
        "stage": "uncalibrated",
    }


def cmd_quantize(args) -> int:
    file_cfg = _load_config_file(args.config)
    params, config = _load_model(args.model)
    seed = _seed_from(args, file_cfg)
    names = dit.quantizable_layer_names(config)
    plan = _resolve_plan(params, names, args, file_cfg)
    run = RunConfig(
        model=args.model,
        dit=config,
        plan=plan,
        calib=calib.CalibConfig(n=args.n),
        seed=seed,
        outputs={"quantized": args.out, "sidecar": args.sidecar},
    )
    states = _build_states(params, run.plan, args.n, seed)

    layers = {
        name: modelio.QuantizedLayer(
            name=name,
            shape=st.shape,
            codebook=st.codebook,
            assignments=st.cand.candidates[:, 0].copy(),
        )
        for name, st in states.items()
    }
    passthrough = {k: v for k, v in params.items() if k not in plan}
    echo = _quant_config_echo(config, plan, args.n, seed)
    modelio.write_quantized_file(args.out, layers, passthrough, echo)
    _write_sidecar(args.sidecar, states, echo)

    stats = _storage_stats(params, states)
    rows = reports.storage_rows(stats)
    _say(reports.format_table(reports.STORAGE_HEADER, rows))
    _say("wrote,%s" % args.out)
    _say("wrote,%s" % args.sidecar)
    return 0


def _states_from_artifacts(
    qm: modelio.QuantizedModel, cands: Dict[str, vq.CandidateSet]
) -> Dict[str, calib.LayerState]:
    if set(qm.layers) != set(cands):
        raise CliError("sidecar layers do not match the quantized file")
    states = {}
    for name in sorted(qm.layers):
        layer = qm.layers[name]
        cand = cands[name]
        if cand.candidates.shape[0] != layer.shape.num_subvectors:
            raise CliError("sidecar for %s has the wrong number of sub-vectors" % name)
        if cand.candidates.max(initial=0) >= layer.shape.k or cand.candidates.min(initial=0) < 0:
            raise CliError("sidecar for %s indexes outside the codebook" % name)
        states[name] = calib.LayerState(
            name=name,
            shape=layer.shape,
            codebook=layer.codebook.copy(),
            cand=vq.CandidateSet(
                candidates=cand.candidates.copy(), logits=cand.logits.copy()
            ),
        )
    return states


def cmd_calibrate(args) -> int:
    file_cfg = _load_config_file(args.config)
    params, config = _load_model(args.model)
    qm = modelio.read_quantized_file(args.quantized)
    if qm.config.get("dit") != config.to_dict():
        raise CliError("quantized file was built for a different model config")
    cands, side_echo = _read_sidecar(args.sidecar)
    if side_echo.get("dit") not in (None, config.to_dict()):
        raise CliError("sidecar was built for a different model config")
    states = _states_from_artifacts(qm, cands)

    cal = _calib_config_from(args, file_cfg)
    if getattr(args, "seed", None) is not None:
        cal = dataclasses.replace(cal, seed=args.seed)
    side_n = next(iter(states.values())).cand.n if states else cal.n
    if cal.mode == "full":
        if cal.n > side_n:
            raise CliError("sidecar holds n=%d candidates; cannot calibrate with n=%d" % (side_n, cal.n))
        if cal.n < side_n:
            calib._restrict_candidates(states, cal.n)

    cache = _get_cache(params, config, args.trajectories, cal.seed, "calib", args.model)
    try:
        result = calib.calibrate(params, states, config, cal, cache)
    except calib.CalibrationDiverged as exc:
        if args.log:
            with open(args.log, "w") as fh:
                fh.write(json.dumps({"event": "diverged", **exc.snapshot}, sort_keys=True) + "\n")
        raise

    layers = {
        name: modelio.QuantizedLayer(
            name=name,
            shape=st.shape,
            codebook=st.codebook,
            assignments=result.assignments[name],
        )
        for name, st in result.states.items()
    }
    echo = dict(qm.config)
    echo["stage"] = cal.mode
    echo["calib"] = dataclasses.asdict(cal)
    echo["trajectories"] = args.trajectories
    modelio.write_quantized_file(args.out, layers, qm.passthrough, echo)

    with open(args.log, "w") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(
            json.dumps(
                {"event": "final", "frozen_at": result.frozen_at, "mode": cal.mode},
                sort_keys=True,
            )
            + "\n"
        )

    _say("iterations,%d" % len(result.log))
    _say("frozen,%d/%d" % (len(result.frozen_at), len(states)))
    if result.log:
        _say("final_L_d,%s" % _fmt(result.log[-1]["L_d"]))
        _say("final_L_r,%s" % _fmt(result.log[-1]["L_r"]))
    _say("wrote,%s" % args.out)
    _say("wrote,%s" % args.log)
    return 0


def _quantized_weight_map(
    params: Dict[str, np.ndarray], qm: modelio.QuantizedModel
) -> Tuple[Dict[str, np.ndarray], Dict[str, float]]:
    weights = dict(params)
    per_layer = {}
    for name, layer in qm.layers.items():
        hard = vq.reconstruct_hard(layer.codebook, layer.assignments, layer.shape)
        weights[name] = hard
        ref = params[name].astype(np.float64)
        per_layer[name] = float(np.mean((ref - hard) ** 2))
    return weights, per_layer


def _final_latent_mse(
    fp_params: Dict[str, np.ndarray],
    weights: Dict[str, np.ndarray],
    config: dit.DiTConfig,
    seed: int,
    count: int,
) -> float:
    total = 0.0
    for i in range(count):
        y = 1 + (i % config.classes)
        s = seed + 7000 + i
        fp = dit.ddpm_sample(fp_params, y, config, seed=s, collect_blocks=False).final
        qq = dit.ddpm_sample(weights, y, config, seed=s, collect_blocks=False).final
        total += float(np.mean((fp.astype(np.float64) - qq.astype(np.float64)) ** 2))
    return total / count


_EVAL_HEADER = (
    "label",
    "weight_mse",
    "block_mse",
    "final_latent_mse",
    "assignment_mb",
    "codebook_mb",
    "bits_per_weight",
)


def cmd_eval(args) -> int:
    params, config = _load_model(args.model)
    names = dit.quantizable_layer_names(config)
    seed = args.seed if args.seed is not None else 0
    cache = _get_cache(params, config, args.trajectories, seed + 5000, "eval", args.model)

    dense_count = sum(int(params[n].size) for n in names)
    dense_mb = dense_count * 4 / 1e6

    rows: List[List] = []
    detail: List[List] = []

    fp_block = calib.block_output_error(params, params, config, cache)
    fp_final = _final_latent_mse(params, params, config, seed, args.samples)
    rows.append(["fp", _fmt(0.0), _fmt(fp_block), _fmt(fp_final), _fmt(dense_mb), _fmt(0.0), _fmt(32.0)])

    for b in args.uq_bits or []:
        weights = dict(params)
        err = 0.0
        for name in names:
            q, _ = vq.uniform_quantize(params[name], b)
            weights[name] = q
            err += float(np.sum((params[name].astype(np.float64) - q) ** 2))
        block = calib.block_output_error(params, weights, config, cache)
        final = _final_latent_mse(params, weights, config, seed, args.samples)
        asg_mb = dense_count * b / 8e6
        cb_mb = len(names) * 4 / 1e6  # one float32 scale per layer
        bits = (dense_count * b + len(names) * 32) / dense_count
        rows.append(
            ["uq%d" % b, _fmt(err / dense_count), _fmt(block), _fmt(final), _fmt(asg_mb), _fmt(cb_mb), _fmt(bits)]
        )

    for path in args.quantized or []:
        qm = modelio.read_quantized_file(path)
        if qm.config.get("dit") != config.to_dict():
            raise CliError("%s was quantized for a different model config" % path)
        label = os.path.splitext(os.path.basename(path))[0]
        weights, per_layer = _quantized_weight_map(params, qm)
        q_count = sum(int(params[n].size) for n in qm.layers)
        err = sum(per_layer[n] * params[n].size for n in qm.layers)
        block = calib.block_output_error(params, weights, config, cache)
        final = _final_latent_mse(params, weights, config, seed, args.samples)
        asg_bits = 0.0
        cb_bits = 0.0
        for name in sorted(qm.layers):
            rep = vq.storage_report(qm.layers[name].shape)
            asg_bits += rep["assignment_bits"]
            cb_bits += rep["codebook_bits"]
            detail.append(
                [
                    label,
                    name,
                    "%dx%d" % (qm.layers[name].shape.k, qm.layers[name].shape.d),
                    _fmt(rep["effective_bits_per_weight"]),
                    _fmt(per_layer[name]),
                ]
            )
        rows.append(
            [
                label,
                _fmt(err / q_count if q_count else 0.0),
                _fmt(block),
                _fmt(final),
                _fmt(asg_bits / 8e6),
                _fmt(cb_bits / 8e6),
                _fmt((asg_bits + cb_bits) / q_count if q_count else 0.0),
            ]
        )

    _say(reports.format_table(_EVAL_HEADER, rows))
    if detail:
        _say("")
        _say(reports.format_table(("label", "layer", "kxd", "bits_per_weight", "weight_mse"), detail))
    if args.out:
        reports.write_csv(args.out, _EVAL_HEADER, rows)
        if detail:
            stem, ext = os.path.splitext(args.out)
            reports.write_csv(stem + "_layers" + (ext or ".csv"), ("label", "layer", "kxd", "bits_per_weight", "weight_mse"), detail)
        _say("wrote,%s" % args.out)
    return 0


def _read_log(path: str) -> Tuple[List[dict], List[dict]]:
    try:
        with open(path, "r") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    except OSError as exc:
        raise CliError("cannot read log %s: %s" % (path, exc))
    records = []
    events = []
    for ln in lines:
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise CliError("log line is not JSON: %s" % exc)
        (records if "iter" in rec else events).append(rec)
    return records, events


def cmd_report(args) -> int:
    for path in (args.log, args.quantized, args.sidecar):
        if not os.path.exists(path):
            raise CliError("missing input: %s" % path)
    records, events = _read_log(args.log)
    qm = modelio.read_quantized_file(args.quantized)
    cands, _ = _read_sidecar(args.sidecar)
    if set(cands) != set(qm.layers):
        raise CliError("sidecar layers do not match the quantized file")

    os.makedirs(args.out_dir, exist_ok=True)
    written = []

    paths = reports.write_loss_curves(records, args.out_dir)
    written.extend([paths["csv"], paths["png"]])

    per_layer = {}
    counts = {}
    for name in sorted(qm.layers):
        layer = qm.layers[name]
        per_layer[name] = calib.candidate_position_report(layer.assignments, cands[name])
        counts[name] = layer.shape.num_subvectors
    paths = reports.write_position_histogram(per_layer, counts, args.out_dir)
    written.extend([paths["csv"], paths["png"]])

    model_params = None
    config = None
    if args.model:
        model_params, config = _load_model(args.model)
        if qm.config.get("dit") != config.to_dict():
            raise CliError("%s was quantized for a different model config" % args.quantized)

    stats = []
    for name in sorted(qm.layers):
        layer = qm.layers[name]
        rep = vq.storage_report(layer.shape)
        mse = None
        if model_params is not None:
            hard = vq.reconstruct_hard(layer.codebook, layer.assignments, layer.shape)
            mse = float(np.mean((model_params[name].astype(np.float64) - hard) ** 2))
        stats.append(
            {
                "name": name,
                "k": layer.shape.k,
                "d": layer.shape.d,
                "codebook_mb": rep["codebook_bits"] / 8e6,
                "assignment_mb": rep["assignment_bits"] / 8e6,
                "bits": rep["effective_bits_per_weight"],
                "mse": mse,
            }
        )
    paths = reports.write_storage_table(stats, args.out_dir)
    written.append(paths["csv"])

    if args.grad_cosine:
        if model_params is None:
            raise CliError("--grad-cosine needs --model")
        states = _states_from_artifacts(qm, cands)
        cache = _get_cache(
            model_params, config, args.trajectories, args.seed or 0, "report", args.model
        )
        cal = calib.CalibConfig(
            iters=args.grad_iters, batch=8, n=next(iter(states.values())).cand.n, seed=args.seed or 0
        )
        rep = calib.grad_cosine_report(model_params, states, config, cache, cal, sample_size=8)
        paths = reports.write_grad_cosine_histogram(rep.before, rep.after, args.out_dir)
        written.extend([paths["csv"], paths["png"]])
        _say("grad_cosine_before,%s" % _fmt(rep.mean_before))
        _say("grad_cosine_after,%s" % _fmt(rep.mean_after))

    pooled = reports.pooled_positions(per_layer, counts)
    _say("positions," + ",".join(_fmt(float(p)) for p in pooled))
    if records:
        _say("iterations,%d" % len(records))
        _say("final_L,%s" % _fmt(records[-1]["L"]))
    for ev in events:
        if ev.get("event") == "diverged":
            _say("diverged,iter=%s" % ev.get("iter"))
    for path in written:
        _say("wrote,%s" % path)
    return 0


def cmd_inspect(args) -> int:
    try:
        with open(args.file, "rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise CliError("cannot read %s: %s" % (args.file, exc))
    if head == modelio.MAGIC.to_bytes(4, "little"):
        qm = modelio.read_quantized_file(args.file)
        _say("kind,quantized")
        _say("stage,%s" % qm.config.get("stage", ""))
        rows = []
        for name in sorted(qm.layers):
            sh = qm.layers[name].shape
            rep = vq.storage_report(sh)
            rows.append([name, sh.o, sh.i, sh.d, sh.k, _fmt(rep["effective_bits_per_weight"])])
        _say(reports.format_table(("layer", "o", "i", "d", "k", "bits_per_weight"), rows))
        _say("passthrough,%d" % len(qm.passthrough))
        return 0
    box = modelio.read_container_file(args.file)
    _say("kind,container")
    for key in sorted(box.metadata):
        _say("meta.%s,%s" % (key, box.metadata[key]))
    rows = [[name, str(box.tensors[name].dtype), "x".join(map(str, box.tensors[name].shape))]
            for name in sorted(box.tensors)]
    _say(reports.format_table(("tensor", "dtype", "shape"), rows))
    return 0


def _parse_size(text: str) -> Tuple[int, int, int, int]:
    parts = text.split(",")
    if len(parts) != 4:
        raise CliError("size must be o,i,d,k (got %r)" % text)
    try:
        o, i, d, k = (int(p) for p in parts)
    except ValueError:
        raise CliError("size must be four integers (got %r)" % text)
    return o, i, d, k


def cmd_bench(args) -> int:
    sizes = [_parse_size(s) for s in args.sizes] if args.sizes else [
        (256, 256, 4, 256),
        (512, 512, 4, 256),
        (512, 512, 2, 64),
    ]
    rep = kernel.bench(sizes, repetitions=args.repetitions, q=args.q, seed=args.seed or 0)
    dicts = rep.to_dicts()
    header = list(dicts[0]) if dicts else []
    rows = [[_fmt(r[h]) for h in header] for r in dicts]
    _say(reports.format_table(header, rows))
    if args.out:
        reports.write_csv(args.out, header, rows)
        _say("wrote,%s" % args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_dit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--depth", type=int, default=None, help="transformer blocks")
    p.add_argument("--d-in", dest="d_in", type=int, default=None, help="token width")
    p.add_argument("--heads", type=int, default=None, help="attention heads")
    p.add_argument("--n-tok", dest="n_tok", type=int, default=None, help="tokens per sample")
    p.add_argument("--classes", type=int, default=None, help="number of labels")
    p.add_argument("--timesteps", type=int, default=None, help="diffusion steps")
    p.add_argument("--cfg-scale", dest="cfg_scale", type=float, default=None, help="guidance scale")


def _add_calib_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda-d", dest="lambda_d", type=float, default=None)
    p.add_argument("--lambda-r", dest="lambda_r", type=float, default=None)
    p.add_argument("--lambda-freeze", dest="lambda_freeze", type=float, default=None)
    p.add_argument("--lr-ratio", dest="lr_ratio", type=float, default=None)
    p.add_argument("--lr-codebook", dest="lr_codebook", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--n", type=int, default=None, help="candidates per sub-vector")
    p.add_argument("--mode", choices=["full", "codebook_only", "none"], default=None)
    p.add_argument(
        "--tune-extras",
        dest="tune_extras",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="also tune in-block 1-D parameters",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vqkit",
        description="Vector-quantize diffusion-transformer weights and calibrate them without data.",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="cap worker threads (the current implementation is serial; the cap is honoured trivially)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-model", help="write a freshly initialised toy model")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    _add_dit_flags(p)
    p.set_defaults(func=cmd_make_toy_model)

    p = sub.add_parser("quantize", help="cluster weights into per-layer codebooks")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="quantized model path")
    p.add_argument("--sidecar", required=True, help="candidate-set sidecar path")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--d", type=int, default=None, help="sub-vector length")
    p.add_argument("--k", type=int, default=None, help="codebook size (power of two)")
    p.add_argument("--bits", type=float, default=None, help="target bits/weight, resolved to k")
    p.add_argument("--n", type=int, default=2, help="candidates per sub-vector")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("calibrate", help="zero-data calibration of assignments and codebooks")
    p.add_argument("--model", required=True)
    p.add_argument("--quantized", required=True)
    p.add_argument("--sidecar", required=True)
    p.add_argument("--out", required=True, help="final quantized model path")
    p.add_argument("--log", required=True, help="loss log (JSON lines)")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trajectories", type=int, default=16, help="cached sampling trajectories")
    _add_calib_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="compare quantized models against the float model")
    p.add_argument("--model", required=True)
    p.add_argument("--quantized", action="append", default=[], help="quantized file (repeatable)")
    p.add_argument("--uq-bits", dest="uq_bits", action="append", type=int, default=[],
                   help="add a round-to-nearest uniform baseline at this bit-width (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trajectories", type=int, default=8)
    p.add_argument("--samples", type=int, default=4, help="end-to-end sampling pairs")
    p.add_argument("--out", default=None, help="also write the summary table as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render tables and figures from a calibration run")
    p.add_argument("--log", required=True)
    p.add_argument("--quantized", required=True)
    p.add_argument("--sidecar", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--grad-cosine", dest="grad_cosine", action="store_true",
                   help="measure per-codeword gradient cosine before/after assignment calibration")
    p.add_argument("--grad-iters", dest="grad_iters", type=int, default=80)
    p.add_argument("--trajectories", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect", help="describe a model or quantized file")
    p.add_argument("--file", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", help="time the fused kernel against a dense matmul")
    p.add_argument("--sizes", action="append", default=[], help="o,i,d,k (repeatable)")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--q", type=int, default=1, help="activation columns")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except CliError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except modelio.ModelIOError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except calib.CalibrationDiverged as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
