"""``streamasr`` command line: synth, init, run, compress, verify-compressed, bench, flops.

Exit codes: 0 success, 1 internal error or failed check, 2 bad input.
"""

from __future__ import annotations

import argparse
import glob
import json
import sys
from fractions import Fraction
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import load_manifest, load_utterances, synth_dataset
from .errors import StreamASRError
from .masks import AttentionMaskSpec, check_mask, encoder_flops
from .metrics import SessionReport, histogram, merge_reports, session_report
from .model import ModelConfig, init_weights
from .odmbp import (
    OutlierPolicy,
    allocate_bits,
    check_forward_equivalence,
    compress_checkpoint,
    load_compressed,
    save_compressed,
    tensor_errors,
    uniform_bits,
)
from .streaming import LocalAgreement, SessionConfig, events_to_jsonl, run_session
from .transcribers import ModelTranscriber, ScriptedTranscriber


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 2."""


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _mask(text: str) -> AttentionMaskSpec:
    try:
        return AttentionMaskSpec.parse(text)
    except StreamASRError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_init(args) -> int:
    cfg = ModelConfig(
        d_model=args.d_model, n_heads=args.heads, n_enc_layers=args.layers, n_dec_layers=args.layers,
        vocab_size=args.vocab, n_audio_frames=args.frames, frames_per_second=Fraction(args.fps),
        seed=args.seed, d_feat=args.d_feat, n_text_ctx=args.text_ctx, pos_encoding=args.pos,
    )
    n = save_checkpoint(init_weights(cfg), args.out)
    print(f"wrote {args.out} ({n} bytes)")
    return 0


def cmd_synth(args) -> int:
    m = synth_dataset(args.out, args.seed, args.utterances, args.words, Fraction(args.fps), args.d_feat, args.noise)
    print(f"wrote {len(m['utterances'])} utterances to {args.out}")
    return 0


def _model_transcriber_factory(args, manifest):
    if args.checkpoint is None:
        raise UsageError("--transcriber model needs --checkpoint")
    weights = load_checkpoint(args.checkpoint)
    cfg = weights.config
    if Fraction(manifest["frames_per_second"]) != cfg.frames_per_second:
        raise UsageError(f"dataset runs at {manifest['frames_per_second']} fps, model at {cfg.frames_per_second}")
    if manifest["d_feat"] != cfg.d_feat:
        raise UsageError(f"dataset has d_feat={manifest['d_feat']}, model expects {cfg.d_feat}")
    if args.window is not None and Fraction(args.window).limit_denominator(10**6) != cfg.window_seconds:
        raise UsageError(f"--window must equal the model window of {float(cfg.window_seconds)} s")
    mask = args.mask or AttentionMaskSpec.full()
    try:
        check_mask(mask, cfg.n_audio_frames)
    except StreamASRError as exc:
        raise UsageError(f"mask {mask.label} does not fit the checkpoint: {exc}") from exc
    vocab = list(manifest["vocab"])
    words = vocab[: cfg.n_text_tokens] + [f"tok{i}" for i in range(len(vocab), cfg.n_text_tokens)]
    window = float(cfg.window_seconds)

    def make(utt, index):
        return ModelTranscriber(weights, mask, words, use_cache=not args.no_cache, max_tokens=args.max_tokens)

    return make, window, mask.label


def cmd_run(args) -> int:
    manifest = load_manifest(args.dataset)
    utterances = load_utterances(args.dataset)
    if args.transcriber == "model":
        make, window, mask_label = _model_transcriber_factory(args, manifest)
    else:
        if args.checkpoint is not None or args.mask is not None:
            raise UsageError("--checkpoint and --mask only apply to --transcriber model")
        window, mask_label = args.window if args.window is not None else 30.0, "none"

        def make(utt, index):
            return ScriptedTranscriber(utt.reference, utt.stream.total_duration,
                                       args.p_sub, args.p_del, args.p_ins, seed=args.seed + index)

    config = SessionConfig(args.interval, window, args.latency)
    policy = LocalAgreement(args.agreement)
    label = args.label or f"{args.transcriber}-{mask_label}-i{args.interval:g}"
    out = Path(args.out)
    (out / "sessions").mkdir(parents=True, exist_ok=True)
    (out / "session.cfg").write_text(config.to_text())

    reports = []
    for index, utt in enumerate(utterances):
        session = run_session(utt.stream, make(utt, index), config, policy)
        (out / "sessions" / f"{utt.id}.events.jsonl").write_text(events_to_jsonl(session.events))
        report = session_report(session, utt.reference, label=label, name=utt.id)
        (out / "sessions" / f"{utt.id}.report.json").write_text(report.to_json())
        reports.append(report)
        if not session.complete:
            print(f"{utt.id}: session incomplete: {session.error}", file=sys.stderr)
    if reports:
        agg = merge_reports(reports)
        (out / "aggregate.json").write_text(agg.to_json())
        (out / "latency.csv").write_text(agg.latency_csv())
        print(f"{len(reports)} sessions  wer={agg.wer.wer:.4f}  corrections={agg.corrections.total}  "
              f"mean hypothesis latency={_fmt(agg.hypothesis_latency.mean)} s")
    else:
        print("0 sessions")
    return 0


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.3f}"


def cmd_compress(args) -> int:
    weights = load_checkpoint(args.checkpoint)
    policy = OutlierPolicy(args.sigma, args.max_outliers, args.seed)
    if args.bits is not None:
        if not 1 <= args.bits <= 8:
            raise UsageError("--bits must be between 1 and 8")
        alloc = uniform_bits(weights, args.bits, args.embeddings)
    else:
        if args.target_err < 0:
            raise UsageError("--target-err must be non-negative")
        alloc = allocate_bits(weights, args.target_err, policy=policy, include_embeddings=args.embeddings)
    ckpt, report = compress_checkpoint(weights, policy, alloc)
    n = save_compressed(ckpt, args.out)
    assert n == report.compressed_bytes
    report_path = Path(args.report) if args.report else Path(str(args.out) + ".report.json")
    _write_json(report_path, report.to_dict())
    print(f"ratio {report.ratio:.3f}  ({report.original_bytes} -> {report.compressed_bytes} bytes, "
          f"{len(report.tensors)} tensors, {sum(t.flagged for t in report.tensors.values())} flagged)")
    return 0


def cmd_verify(args) -> int:
    ckpt = load_compressed(args.compressed)
    worst = check_forward_equivalence(ckpt, seed=args.seed, trials=args.trials)
    result = {"forward_rel_error": worst, "tolerance": args.tol, "ok": worst <= args.tol}
    if args.checkpoint:
        weights = load_checkpoint(args.checkpoint)
        if weights.config != ckpt.config:
            raise UsageError("compressed file was made from a checkpoint with a different config")
        errs = {}
        for name, rec in sorted(ckpt.records.items()):
            if hasattr(rec, "reconstruct"):
                errs[name] = tensor_errors(weights[name], rec)[1]
        result["max_rel_frobenius_error"] = max(errs.values(), default=0.0)
    print(json.dumps(result, sort_keys=True))
    return 0 if result["ok"] else 1


def cmd_bench(args) -> int:
    paths = sorted({p for pattern in args.reports for p in glob.glob(pattern, recursive=True)})
    if not paths:
        raise UsageError("no report files matched")
    reports = []
    for p in paths:
        try:
            reports.append(SessionReport.from_dict(json.loads(Path(p).read_text())))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise UsageError(f"{p}: not a session report ({exc})") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    agg = merge_reports(reports)
    (out / "aggregate.json").write_text(agg.to_json())
    (out / "latency.csv").write_text(agg.latency_csv())

    by_label: dict[str, list[SessionReport]] = {}
    for r in reports:
        by_label.setdefault(r.label, []).append(r)
    lines, rows = {}, ["label,stream,lo,count"]
    for label in sorted(by_label):
        m = merge_reports(by_label[label])
        lines[label] = {"hypothesis_mean": m.hypothesis_latency.mean, "confirmed_mean": m.confirmed_latency.mean,
                        "wer": m.wer.wer, "corrections": m.corrections.to_dict(), "sessions": m.sessions}
        for summ in (m.hypothesis_latency, m.confirmed_latency):
            for b in histogram(s.latency for s in summ.samples):
                rows.append(f"{label},{summ.stream},{b['lo']!r},{b['count']}")
    _write_json(out / "means.json", lines)
    (out / "histogram.csv").write_text("\n".join(rows) + "\n")
    print(f"merged {len(reports)} reports over {len(by_label)} labels into {out}")
    return 0


def cmd_flops(args) -> int:
    d_ff = args.d_ff if args.d_ff is not None else 4 * args.d_model
    base = encoder_flops(AttentionMaskSpec.full(), args.seq_len, args.d_model, args.layers, d_ff)
    report = {"full": base.to_dict()}
    for spec in args.mask or []:
        f = encoder_flops(spec, args.seq_len, args.d_model, args.layers, d_ff)
        d = f.to_dict()
        d["ratio_vs_full"] = base.total / f.total
        d["attention_ratio_vs_full"] = base.attention / f.attention
        report[spec.label] = d
    print(json.dumps(report, sort_keys=True, indent=1))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamasr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="write a randomly initialized toy checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--d-model", type=int, default=32)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--vocab", type=int, default=64)
    s.add_argument("--frames", type=int, default=60, help="encoder window length in frames")
    s.add_argument("--fps", default="10")
    s.add_argument("--d-feat", type=int, default=16)
    s.add_argument("--text-ctx", type=int, default=64)
    s.add_argument("--pos", choices=["absolute", "block"], default="absolute")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--utterances", type=int, default=4)
    s.add_argument("--words", type=int, default=10, help="words per utterance")
    s.add_argument("--fps", default="10")
    s.add_argument("--d-feat", type=int, default=16)
    s.add_argument("--noise", type=float, default=0.1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("run", help="stream every utterance of a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--transcriber", choices=["scripted", "model"], default="scripted")
    s.add_argument("--checkpoint")
    s.add_argument("--mask", type=_mask, help="full | d<block> | c<block>")
    s.add_argument("--no-cache", action="store_true", help="disable silence caching")
    s.add_argument("--max-tokens", type=int)
    s.add_argument("--interval", type=float, default=1.0)
    s.add_argument("--window", type=float)
    s.add_argument("--latency", type=float, default=0.0, help="processing latency per invocation (s)")
    s.add_argument("--agreement", type=int, default=2)
    s.add_argument("--p-sub", type=float, default=0.0)
    s.add_argument("--p-del", type=float, default=0.0)
    s.add_argument("--p-ins", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--label")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("compress", help="OD-MBP compress a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--bits", type=int)
    g.add_argument("--target-err", type=float)
    s.add_argument("--sigma", type=float, default=3.0)
    s.add_argument("--max-outliers", type=float, default=0.05)
    s.add_argument("--embeddings", action="store_true", help="also compress embedding tables")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("verify-compressed", help="check compressed forward against the dense reconstruction")
    s.add_argument("--compressed", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--trials", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("bench", help="merge session reports into plot-ready files")
    s.add_argument("--reports", nargs="+", required=True, help="report files or glob patterns")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("flops", help="itemized encoder FLOPs per mask")
    s.add_argument("--mask", type=_mask, action="append")
    s.add_argument("--seq-len", type=int, default=1500)
    s.add_argument("--d-model", type=int, default=1280)
    s.add_argument("--layers", type=int, default=32)
    s.add_argument("--d-ff", type=int)
    s.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, StreamASRError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
