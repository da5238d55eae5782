"""Command-line entry point.

    quweit workload --preset gpt3
    quweit cost --preset ivit-t --profile fpga-32x32 --compare
    quweit train --mode weightless --out runs/wl --set train.steps=500
    quweit export-netlist --checkpoint runs/wl/checkpoint.json --quantize --out hdl/
    quweit verify-netlist --checkpoint hdl/checkpoint.quantized.json

Exit status: 0 on success, 1 on domain errors (divergence, corrupt checkpoint,
netlist mismatch), 2 on usage errors (bad flags, unknown config keys, missing files).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import costmodel as cm
from .checkpoint import CheckpointError, load_checkpoint, make_checkpoint, restore_model, save_checkpoint
from .codegen import NetlistError, build_netlist, emit_hdl, verify_equivalence
from .presets import PRESETS
from .trainer import TrainConfig, TrainingDiverged, estimate_loss, load_corpus, train
from .transformer import ModelConfig, QuWeiTModel, count_workload, generate

DEFAULT_DATA = "data/shakespeare_char/input.txt"
SECTIONS = ("model", "train", "data")
SUBCOMMANDS = ("train", "eval", "generate", "workload", "cost", "export-netlist", "verify-netlist")


class UsageError(Exception):
    pass


class DomainError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one ``section.key=value`` override; values are JSON, falling back to strings."""
    if "=" not in assignment:
        raise UsageError(f"--set {assignment!r}: expected key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    if parts[0] not in SECTIONS:
        raise UsageError(f"--set {key!r}: key must start with one of {', '.join(SECTIONS)}")
    if parts[0] == "data":
        if len(parts) != 1:
            raise UsageError(f"--set {key!r}: 'data' takes a path, not sub-keys")
        cfg["data"] = value
        return
    if len(parts) < 2:
        raise UsageError(f"--set {key!r}: missing key after {parts[0]!r}")
    node = cfg.setdefault(parts[0], {})
    for p in parts[1:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"--set {key!r}: {p!r} is not a mapping")
    node[parts[-1]] = _parse_value(value)


def resolve_config(args) -> dict:
    """Preset, then config file, then --mode/--seed, then --set overrides."""
    cfg: dict = {"model": {}, "train": {}}
    preset = getattr(args, "preset", None)
    if preset:
        cfg["model"].update(json.loads(json.dumps(PRESETS[preset])))
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise UsageError(f"config file {path}: unknown sections {sorted(unknown)}")
        for sec in ("model", "train"):
            cfg[sec].update(doc.get(sec, {}))
        if "data" in doc:
            cfg["data"] = doc["data"]
    if getattr(args, "mode", None):
        cfg["model"]["block_kind"] = args.mode
    if getattr(args, "seed", None) is not None:
        cfg["model"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    for s in getattr(args, "set", None) or []:
        apply_override(cfg, s)
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(cfg["model"])
    except KeyError as exc:
        raise UsageError(f"model config: {exc.args[0]}")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"model config: {exc}")


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except KeyError as exc:
        raise UsageError(f"train config: {exc.args[0]}")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"train config: {exc}")


def data_path(cfg: dict, args) -> Path:
    path = Path(getattr(args, "data", None) or cfg.get("data") or os.environ.get("QUWEIT_DATA", DEFAULT_DATA))
    if not path.is_file():
        raise UsageError(f"corpus file not found: {path}")
    return path


def _load_ckpt(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint file not found: {p}")
    return load_checkpoint(p)


def _emit(text: str, out: Path | None, name: str) -> None:
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text if text.endswith("\n") else text + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    path = data_path(cfg, args)
    tcfg = train_config(cfg)
    ds = load_corpus(path, tcfg.split)
    cfg["model"]["vocab_size"] = ds.vocab_size
    mcfg = model_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = QuWeiTModel(mcfg)
    try:
        records, best = train(model, ds, tcfg, metrics_path=out / "metrics.csv",
                              progress=None if args.quiet else print)
    except TrainingDiverged as exc:
        raise DomainError(f"training diverged: {exc}")
    save_checkpoint(best, out / "checkpoint.json")
    (out / "config.json").write_text(json.dumps(
        {"model": mcfg.to_dict(), "train": tcfg.__dict__, "data": str(path)}, indent=2, sort_keys=True) + "\n")
    val = [r for r in records if r.split == "val"]
    print(f"best val loss {min(r.loss for r in val):.4f} at step {best.step}; digest {best.digest}")
    return 0


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    cfg = resolve_config(args)
    tcfg = TrainConfig.from_dict({**(ckpt.payload.get("train_config") or {}), **cfg["train"]})
    ds = load_corpus(data_path(cfg, args), tcfg.split)
    model = restore_model(ckpt)
    if ds.vocab_size != model.config.vocab_size:
        raise UsageError(f"corpus vocabulary {ds.vocab_size} != checkpoint vocabulary {model.config.vocab_size}")
    result = {split: estimate_loss(model, data, tcfg, seed=tcfg.seed + 7919)
              for split, data in (("train", ds.train), ("val", ds.val))}
    result["checkpoint_digest"] = ckpt.digest
    _emit(json.dumps(result, indent=2, sort_keys=True), Path(args.out) if args.out else None, "eval.json")
    return 0


def cmd_generate(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    cfg = resolve_config(args)
    ds = load_corpus(data_path(cfg, args))
    model = restore_model(ckpt)
    if ds.vocab_size != model.config.vocab_size:
        raise UsageError(f"corpus vocabulary {ds.vocab_size} != checkpoint vocabulary {model.config.vocab_size}")
    try:
        prompt = ds.encode(args.prompt)
    except KeyError as exc:
        raise UsageError(f"--prompt contains a symbol outside the vocabulary: {exc}")
    ids = generate(model, prompt, args.steps, args.temperature, seed=args.seed or 0)
    _emit(ds.decode(ids), Path(args.out) if args.out else None, "sample.txt")
    return 0


def cmd_workload(args) -> int:
    cfg = resolve_config(args)
    wl = count_workload(model_config(cfg))
    out = Path(args.out) if args.out else None
    if args.format == "json":
        _emit(json.dumps(wl.to_dict(), indent=2), out, "workload.json")
    else:
        _emit(wl.to_text(), out, "workload.txt")
    return 0


def cmd_cost(args) -> int:
    cfg = resolve_config(args)
    mcfg = model_config(cfg)
    try:
        profiles = cm.load_profiles(args.profiles)
    except FileNotFoundError:
        raise UsageError(f"profiles file not found: {args.profiles}")
    out = Path(args.out) if args.out else None
    if args.table:
        rows = cm.mlp_vs_pe_table(profiles, mcfg, accumulation_factor=args.accumulation_factor)
        cols = ["method", "cycles", "fpga_energy_uj", "asic_energy_uj"]
        if args.format == "json":
            _emit(json.dumps(rows, indent=2), out, "mlp_vs_pe.json")
        elif args.format == "csv":
            _emit(cm.to_csv(rows), out, "mlp_vs_pe.csv")
        else:
            _emit(cm.format_table(rows, cols), out, "mlp_vs_pe.txt")
        return 0
    if args.profile not in profiles:
        raise UsageError(f"--profile {args.profile!r}: unknown; choose from {sorted(profiles)}")
    prof = profiles[args.profile]
    use_wl = mcfg.block_kind == "weightless" and not args.compare
    stages = cm.encoder_layer_report(mcfg, prof, use_wl, args.accumulation_factor)
    doc = {"profile": prof.label, "quweit" if use_wl else "baseline": cm.report_json(stages)}
    text = [f"profile {prof.label} ({prof.array_dim}x{prof.array_dim}, {prof.clock_hz / 1e6:g} MHz)",
            cm.format_table(cm.stages_to_rows(stages), ["stage", "unit", "cycles", "energy_uj"])]
    rows = cm.stages_to_rows(stages)
    if args.compare:
        q = cm.encoder_layer_report(mcfg, prof, True, args.accumulation_factor)
        comp = cm.compare(stages, q)
        doc["quweit"] = cm.report_json(q)
        doc["comparison"] = comp.to_dict()
        text += ["", "QuWeiT", cm.format_table(cm.stages_to_rows(q), ["stage", "unit", "cycles", "energy_uj"]), "",
                 f"total baseline {comp.baseline_total_j * 1e6:.2f} uJ vs QuWeiT {comp.quweit_total_j * 1e6:.2f} uJ; "
                 f"ratio {comp.ratio:.2f}x"]
        rows = [dict(r, variant="baseline") for r in rows] + \
               [dict(r, variant="quweit") for r in cm.stages_to_rows(q)]
    if args.format == "json":
        _emit(json.dumps(doc, indent=2), out, "cost.json")
    elif args.format == "csv":
        _emit(cm.to_csv(rows), out, "cost.csv")
    else:
        _emit("\n".join(text), out, "cost.txt")
    return 0


def _block_indices(ckpt, block):
    n = len(ckpt.weightless)
    if n == 0:
        raise DomainError("checkpoint has no weightless blocks")
    return range(n) if block is None else [block]


def _quantized(ckpt, path):
    """Checkpoint with every weightless block's encodings quantized, saved at ``path``."""
    model = restore_model(ckpt)
    for b in model.weightless_blocks():
        if not b.summation.quantized:
            b.quantize()
    tc = ckpt.payload.get("train_config")
    q = make_checkpoint(model, None, ckpt.step, None, None if tc is None else TrainConfig.from_dict(tc))
    save_checkpoint(q, path)
    return q


def cmd_export_netlist(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.quantize:
        ckpt = _quantized(ckpt, out / "checkpoint.quantized.json")
        print(f"quantized checkpoint -> {out / 'checkpoint.quantized.json'} ({ckpt.digest})")
    for i in _block_indices(ckpt, args.block):
        nl = build_netlist(ckpt, i)
        path = out / f"{nl.name}.v"
        path.write_text(emit_hdl(nl))
        census = nl.census()
        print(f"block {i}: {path}  " + "  ".join(f"{k}={v}" for k, v in census.items()))
    return 0


def cmd_verify_netlist(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    reports = [verify_equivalence(ckpt, i, args.vectors, args.seed or 0)
               for i in _block_indices(ckpt, args.block)]
    _emit(json.dumps(reports, indent=2), Path(args.out) if args.out else None, "verify.json")
    bad = [r for r in reports if r["mismatches"]]
    if bad:
        r = bad[0]
        raise DomainError(f"block {r['block_index']}: {r['mismatches']} mismatches; "
                          f"first failing vector {r['first_mismatch']['vector']}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quweit", description="Weightless-MLP transformer toolkit.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, preset_default=None, data=False, ckpt=False, out_default=None):
        p.add_argument("--config", help="JSON file with optional 'model', 'train' and 'data' sections")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value, e.g. model.d_model=32 or train.steps=100 (repeatable)")
        p.add_argument("--out", default=out_default, help="output directory for artifacts")
        p.add_argument("--seed", type=int, help="seed for every random number consumer")
        p.add_argument("--preset", choices=sorted(PRESETS), default=preset_default, help="named model configuration")
        p.add_argument("--mode", choices=("mlp", "weightless"), help="feed-forward block kind")
        if data:
            p.add_argument("--data", help=f"character corpus (default ${{QUWEIT_DATA}} or {DEFAULT_DATA})")
        if ckpt:
            p.add_argument("--checkpoint", required=True, help="checkpoint JSON file")

    p = sub.add_parser("train", help="train a decoder on a character corpus")
    common(p, "nano-shakespeare", data=True, out_default="runs/latest")
    p.add_argument("--quiet", action="store_true", help="suppress per-eval progress lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="train/val loss of a checkpoint")
    common(p, data=True, ckpt=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="sample text from a checkpoint")
    common(p, data=True, ckpt=True)
    p.add_argument("--prompt", default="\n", help="prompt text")
    p.add_argument("--steps", type=int, default=200, help="tokens to generate")
    p.add_argument("--temperature", type=float, default=1.0, help="sampling temperature; 0 = greedy")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("workload", help="per-stage parameter and MAC counts")
    common(p, "gpt3")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_workload)

    p = sub.add_parser("cost", help="cycle and energy report for one encoder layer")
    common(p, "ivit-t")
    p.add_argument("--profile", default="fpga-32x32", help="hardware profile label")
    p.add_argument("--profiles", help="JSON file of hardware profiles (default: bundled calibration)")
    p.add_argument("--compare", action="store_true", help="report baseline and weightless variants side by side")
    p.add_argument("--table", action="store_true", help="MLP GEMM pair on every array size vs the weightless PE")
    p.add_argument("--accumulation-factor", type=int, default=1, help="PE cycles per activation row")
    p.add_argument("--format", choices=("text", "json", "csv"), default="text")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("export-netlist", help="emit Verilog for the weightless blocks of a checkpoint")
    common(p, ckpt=True, out_default="hdl")
    p.add_argument("--block", type=int, help="block index (default: all)")
    p.add_argument("--quantize", action="store_true",
                   help="quantize encoded values to int8 first and save the quantized checkpoint")
    p.set_defaults(func=cmd_export_netlist)

    p = sub.add_parser("verify-netlist", help="netlist interpreter vs integer inference on random and corner vectors")
    common(p, ckpt=True)
    p.add_argument("--block", type=int, help="block index (default: all)")
    p.add_argument("--vectors", type=int, default=10_000, help="random vectors per block")
    p.set_defaults(func=cmd_verify_netlist)
    return ap


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"quweit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DomainError, CheckpointError, NetlistError) as exc:
        print(f"quweit {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
