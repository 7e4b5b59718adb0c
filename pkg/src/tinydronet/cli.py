"""Command-line front end.

Exit codes: 0 ok, 1 usage error, 2 data/format error, 3 numeric failure.
Machine-readable output goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import analysis, memplan
from .errors import FormatError, ModelError, NumericError, TinyDronetError
from .family import FamilyConfig, as_gamma, build_dronet, remove_bypass, scale_channels
from .graph import TensorShape
from .serialize import dumps_model, load_model, load_weights, save_weights

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _emit(payload, fmt: str = "json", table: str | None = None) -> None:
    if fmt == "table" and table is not None:
        sys.stdout.write(table)
    else:
        sys.stdout.write(json.dumps(payload, indent=2, default=_json_default) + "\n")


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    return float(value)  # Fraction


def parse_bytes(text: str) -> int:
    """'512k' -> 512000, '1.5M' -> 1500000, plain integers pass through."""
    match = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*([kKmM]?)[bB]?\s*", text)
    if not match:
        raise argparse.ArgumentTypeError(f"invalid byte size {text!r}")
    scale = {"": 1, "k": 1000, "m": 1_000_000}[match.group(2).lower()]
    return int(round(float(match.group(1)) * scale))


def _positive_float(text: str) -> float:
    value = float(text)
    if not (value > 0 and math.isfinite(value)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return value


# ------------------------------------------------------------ model source

def _add_model_source(p, positional: bool = True):
    if positional:
        p.add_argument("model", nargs="?", help="model JSON file (default: family shorthand flags)")
    p.add_argument("--gamma", default="1", help="family width multiplier: 0.125, 0.25, 0.5 or 1")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--bypass", dest="bypass", action="store_true", default=True)
    group.add_argument("--no-bypass", dest="bypass", action="store_false")
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--input-size", type=int, default=200, help="square input side in pixels")


def _family_from_args(args):
    try:
        cfg = FamilyConfig(as_gamma(args.gamma), args.bypass,
                           TensorShape(1, args.input_size, args.input_size), args.base_channels)
        return build_dronet(cfg)
    except ModelError as exc:
        raise UsageError(str(exc)) from exc


def _model_from_args(args):
    path = getattr(args, "model", None)
    return load_model(path) if path else _family_from_args(args)


def _bytes_text(n: int) -> str:
    return f"{n:,} B ({analysis.kb(n)})"


# --------------------------------------------------------------- commands

def cmd_describe(args):
    model = _model_from_args(args)
    header, rows, footer = analysis.describe_rows(model)
    macs, size = analysis.count_macs(model), analysis.count_params(model, args.bytes_per_param)
    payload = {
        "layers": [dict(zip(["id", "kind", "output", "params", "macs"], r)) for r in rows],
        "total_params": size.total_params, "total_bytes": size.total_bytes, "total_macs": macs.total,
    }
    table = analysis.format_table(header, rows, footer)
    table += f"totals: {macs.total / 1e6:.2f} MMAC / {analysis.kb(size.total_bytes)} ({size.total_bytes:,} B)\n"
    _emit(payload, args.format, table)


def _write_model(model, out):
    text = dumps_model(model)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_scale(args):
    model = _model_from_args(args)
    try:
        scaled = scale_channels(model, args.to)
    except ModelError as exc:
        raise UsageError(str(exc)) from exc
    _write_model(scaled, args.output)


def cmd_prune(args):
    _write_model(remove_bypass(_model_from_args(args)), args.output)


def cmd_macs(args):
    report = analysis.count_macs(_model_from_args(args))
    rows = [[k, v, f"{report.shares[k]:.4f}"] for k, v in report.per_layer.items()]
    table = analysis.format_table(["layer", "MACs", "share"], rows, ["total", report.total, "1.0000"])
    _emit(report.to_dict(), args.format, table)


def cmd_size(args):
    report = analysis.count_params(_model_from_args(args), args.bytes_per_param)
    rows = [[k, v] for k, v in report.per_layer.items()]
    table = analysis.format_table(["layer", "params"], rows, ["total", report.total_params])
    table += f"size: {_bytes_text(report.total_bytes)}\n"
    _emit(report.to_dict(), args.format, table)


def cmd_compare(args):
    a, b = load_model(args.model_a), load_model(args.model_b)
    result = analysis.compare_models(a, b, args.bytes_per_param)
    table = analysis.format_table(["metric", "value"], [[k, v] for k, v in result.items()
                                                          if not isinstance(v, list)])
    _emit(result, args.format, table)


def cmd_memplan(args):
    model = _model_from_args(args)
    if args.allocator == memplan.INCREMENTAL:
        plan = memplan.plan_incremental(model, args.element_bytes)
    else:
        plan = memplan.plan_dynamic(model, args.weights, args.element_bytes)
    payload = plan.to_dict()
    if args.headroom is not None:
        payload["budget_bytes"] = args.headroom
        payload["headroom_bytes"] = plan.headroom(args.headroom)
    if args.csv:
        Path(args.csv).write_text(plan.to_csv())
    rows = [[s["id"], s["live_bytes"]] for s in payload["steps"]]
    table = analysis.format_table(["step", "live bytes"], rows)
    table += f"peak: {_bytes_text(plan.peak_bytes)} at {plan.peak_layer}\n"
    if args.headroom is not None:
        table += f"headroom: {_bytes_text(payload['headroom_bytes'])} of {_bytes_text(args.headroom)}\n"
    _emit(payload, args.format, table)


def cmd_sparsity(args):
    trace = analysis.load_trace(args.trace)
    try:
        sparsity = analysis.structural_sparsity(trace)
    except ModelError as exc:
        raise FormatError(str(exc)) from exc
    payload = {"samples_seen": trace.samples_seen, "sparsity_percent": {k: float(v) for k, v in sparsity.items()}}
    _emit(payload, args.format, analysis.sparsity_table(trace))


def _read_image(path, shape: TensorShape) -> np.ndarray:
    raw = Path(path).read_bytes() if Path(path).exists() else None
    if raw is None:
        raise FormatError(f"cannot read image {path}")
    if str(path).endswith(".npy"):
        img = np.load(path).astype(np.float32)
        img = img.reshape(shape.as_list()) if img.size == shape.elements else None
    elif len(raw) == shape.elements:
        img = np.frombuffer(raw, np.uint8).reshape(shape.as_list()).astype(np.float32) / 255.0
    else:
        img = None
    if img is None:
        raise FormatError(f"image {path} does not match model input {shape.as_list()}")
    return img


def cmd_infer(args):
    from .engine import forward

    model = _model_from_args(args)
    weights = load_weights(args.weights, model)
    image = _read_image(args.image, model.input_shape)
    result = forward(model, weights, image, capture=bool(args.capture))
    if args.capture:
        analysis.save_trace(result.pop("trace"), args.capture)
    if not all(math.isfinite(v) for v in result.values()):
        raise NumericError("non-finite prediction")
    _emit(result, args.format, analysis.format_table(["output", "value"], [[k, v] for k, v in result.items()]))


def cmd_train(args):
    from .engine import LossConfig, init_weights, load_dataset, synth_dataset, train_toy

    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read config {args.config}: {exc}") from exc
    try:
        seed = int(cfg.get("seed", 0))
        epochs = int(cfg.get("epochs", 30))
        size = int(cfg.get("image_size", 64))
        fam = FamilyConfig(as_gamma(cfg.get("gamma", 1)), bool(cfg.get("bypass", True)),
                           TensorShape(1, size, size), int(cfg.get("base_channels", 32)))
        loss_cfg = LossConfig(total_epochs=epochs, **{k: cfg[k] for k in ("beta_max", "beta_start_epoch",
                                                                           "hard_mining") if k in cfg})
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid train config: {exc}") from exc
    dataset = cfg.get("dataset", {"synthetic": {"n": 200}})
    if isinstance(dataset, str):
        samples = load_dataset(Path(args.config).parent / dataset)
    else:
        synth = dataset.get("synthetic", {})
        samples = synth_dataset(int(synth.get("n", 200)), int(synth.get("seed", seed)), size)
    model = build_dronet(fam)
    result = train_toy(model, init_weights(model, seed), samples, loss_cfg, epochs,
                       float(cfg.get("lr", 1e-2)), seed, int(cfg.get("batch_size", 32)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curves.csv").write_text(result.curves.to_csv())
    (out / "model.json").write_text(dumps_model(model))
    save_weights(result.weights, out / "weights.tpdw")
    analysis.save_trace(result.val_trace, out / "val_trace.tpdt")
    final = result.curves.rows[-1]
    payload = {"epochs": epochs, "final": final, "grad_stats": result.grad_stats,
               "outputs": sorted(p.name for p in out.iterdir())}
    _emit(payload, args.format, result.curves.to_csv())


def cmd_estimate(args):
    if args.macs is not None:
        macs = args.macs
    else:
        macs = analysis.count_macs(_model_from_args(args)).total
    calib = analysis.RuntimeCalibration(args.cycles_per_mac, args.clock, args.power)
    print(f"calibration: {calib.cycles_per_mac:.4g} cycles/MAC ({calib.provenance})", file=sys.stderr)
    est = analysis.estimate_runtime(macs, calib)
    payload = {"macs": macs, **est.to_dict(), "latency_ms": est.latency_s * 1e3, "energy_mj": est.energy_j * 1e3}
    if math.isinf(est.fps):
        payload["fps"] = "inf"
    rows = [["cycles", est.cycles], ["latency ms", est.latency_s * 1e3], ["fps", est.fps],
            ["energy mJ", est.energy_j * 1e3]]
    _emit(payload, args.format, analysis.format_table(["quantity", "value"], rows))


def cmd_synth(args):
    from .engine import save_dataset, synth_dataset

    samples = synth_dataset(args.n, args.seed, args.image_size)
    save_dataset(samples, args.out)
    _emit({"n": len(samples), "collisions": sum(s.collision for s in samples), "path": str(args.out)})


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tinydronet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text, source=True, fmt="json"):
        p = sub.add_parser(name, help=help_text)
        if source:
            _add_model_source(p)
        p.add_argument("--format", choices=("json", "table"), default=fmt)
        p.set_defaults(func=func)
        return p

    p = command("describe", cmd_describe, "layer table with shapes, params and MACs", fmt="table")
    p.add_argument("--bytes-per-param", type=int, default=1)
    p = command("scale", cmd_scale, "rescale channel widths to another gamma")
    p.add_argument("--to", required=True, help="target gamma")
    p.add_argument("-o", "--output")
    p = command("prune", cmd_prune, "remove by-pass branches")
    p.add_argument("-o", "--output")
    command("macs", cmd_macs, "per-layer MAC report")
    p = command("size", cmd_size, "parameter count and model size")
    p.add_argument("--bytes-per-param", type=int, default=1)
    p = command("compare", cmd_compare, "size and MAC ratios of two models", source=False)
    p.add_argument("model_a")
    p.add_argument("model_b")
    p.add_argument("--bytes-per-param", type=int, default=1)
    p = command("memplan", cmd_memplan, "peak memory under an allocator model")
    p.add_argument("--allocator", choices=(memplan.INCREMENTAL, memplan.DYNAMIC), default=memplan.DYNAMIC)
    p.add_argument("--weights", choices=(memplan.STREAMED, memplan.RESIDENT), default=memplan.STREAMED)
    p.add_argument("--element-bytes", type=int, choices=(1, 4), default=1)
    p.add_argument("--headroom", type=parse_bytes, help="memory budget, e.g. 512k")
    p.add_argument("--csv", help="also write per-step live bytes to this CSV file")
    p = command("sparsity", cmd_sparsity, "structural sparsity from a TPDT trace", source=False)
    p.add_argument("trace")
    p = command("infer", cmd_infer, "run one image through a model")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True, help="raw 8-bit grayscale file or .npy array")
    p.add_argument("--capture", help="write the activation trace here")
    p = command("train", cmd_train, "train on a dataset described by a JSON config", source=False)
    p.add_argument("config")
    p.add_argument("--out", required=True, help="output directory")
    p = command("estimate", cmd_estimate, "latency/throughput/energy from a linear cycle model")
    p.add_argument("--macs", type=lambda s: int(float(s)))
    p.add_argument("--cycles-per-mac", type=_positive_float, default=analysis.RuntimeCalibration.cycles_per_mac)
    p.add_argument("--clock", type=_positive_float, default=100e6, help="Hz")
    p.add_argument("--power", type=_positive_float, default=0.034, help="average power in W")
    p = command("synth", cmd_synth, "write a synthetic dataset directory", source=False)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=200)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ModelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TinyDronetError as exc:  # pragma: no cover - catch-all for new subclasses
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
