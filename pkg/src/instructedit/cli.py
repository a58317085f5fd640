"""Command line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 external-client error,
5 internal invariant violation. Failures print one line to stderr::

    error: code=<n> type=<ExceptionName> message=<text>
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import config_hash, dump_config, load_config
from .exceptions import ConfigError, InstructEditError

log = logging.getLogger("instructedit")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(exc: BaseException, code: int):
    message = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"error: code={code} type={exc.__class__.__name__} message={message}",
          file=sys.stderr)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_provenance(out: Path, command: str, seed: int, cfg_hash: str = "", **extra):
    record = {"command": command, "seed": seed, "config_hash": cfg_hash,
              "code_version": __version__, **extra}
    (out / "provenance.json").write_text(json.dumps(record, sort_keys=True, indent=2) + "\n",
                                         encoding="utf-8")


def _parse_window(text: str) -> tuple[int, int]:
    try:
        lo, hi = text.split(":")
        return int(lo), int(hi)
    except ValueError:
        raise UsageError(f"--window must look like a:b, got {text!r}") from None


def _guidance(args, ckpt_payload):
    from .inference import GuidanceConfig

    size = args.size or ckpt_payload.get("image_size") or 512
    return GuidanceConfig(text_scale=args.text_scale, image_scale=args.image_scale,
                          num_steps=args.steps, resize_shorter_side=size)


def cmd_build_data(args) -> int:
    from .dataset import BuildConfig, build_dataset, cost_report, make_synth_sources
    from .forge import CREDENTIALS_ENV, FixtureVlmClient

    overrides = {"seed": args.seed} if args.seed is not None else {}
    if args.preset:
        overrides["preset"] = args.preset
    cfg = load_config(BuildConfig, args.config, overrides)
    out = _out_dir(args.out)
    source_dirs = None
    fixtures = args.mock_vlm
    if not cfg.source_dirs:
        source_dirs, synth_fixtures = make_synth_sources(cfg, out / "work")
        if fixtures in (None, "synth"):
            fixtures = synth_fixtures
    if fixtures is None or fixtures == "synth":
        from .forge import HttpVlmClient

        client = HttpVlmClient.from_env(cfg.model_id)
        log.info("using live VLM client (credentials from %s)", CREDENTIALS_ENV)
    else:
        client = FixtureVlmClient(fixtures, model_id=cfg.model_id)
    manifest = build_dataset(cfg, out, client, source_dirs=source_dirs)
    dump_config(cfg, out / "build_config.yaml")
    _write_provenance(out, "build-data", cfg.seed, cfg.config_hash())
    print(f"built {manifest.total} records into {out}")
    print(cost_report(manifest))
    return 0


def cmd_train(args) -> int:
    from .trainer import TrainConfig, TrainingData, fit

    overrides = {"seed": args.seed} if args.seed is not None else {}
    cfg = load_config(TrainConfig, args.config, overrides)
    out = _out_dir(args.out)
    data = TrainingData.from_dir(args.data, use_rectified=cfg.use_rectified)
    res = fit(cfg, data, out_dir=out, resume=args.resume)
    dump_config(cfg, out / "train_config.yaml")
    _write_provenance(out, "train", cfg.seed, config_hash(cfg),
                      data_records=len(data))
    last = res.metrics[-1] if res.metrics else None
    if last is not None:
        print(f"step {last.step + 1}: l_total={last.l_total:.6f} "
              f"l_triplet={last.l_triplet:.6f}")
    print(f"checkpoint: {res.checkpoint}")
    return 0


def _load_model(path):
    from .trainer import load_checkpoint

    model, _, schedule, payload = load_checkpoint(path)
    return model, schedule, payload


def cmd_edit(args) -> int:
    from .images import load_image, save_png
    from .inference import edit_image

    model, schedule, payload = _load_model(args.model)
    cfg = _guidance(args, payload)
    seed = args.seed if args.seed is not None else 0
    out = edit_image(model, schedule, load_image(args.image), args.instruction, cfg, seed)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_png(out, out_path)
    _write_provenance(out_path.parent, "edit", seed,
                      instruction=args.instruction, guidance=cfg.__dict__)
    print(f"wrote {out_path}")
    return 0


def cmd_probe_prior(args) -> int:
    from .images import load_image, resize, save_png
    from .inference import contact_sheet, edit_image, mask_delta, staged_sample

    window = _parse_window(args.window)
    model, schedule, payload = _load_model(args.model)
    cfg = _guidance(args, payload)
    seed = args.seed if args.seed is not None else 0
    out = _out_dir(args.out)
    image = load_image(args.image)
    staged = staged_sample(model, schedule, image, args.instruction, window, cfg, seed)
    full = edit_image(model, schedule, image, args.instruction, cfg, seed)
    base = resize(image, staged.shape[:2])
    save_png(staged, out / "staged.png")
    save_png(full, out / "full.png")
    save_png(contact_sheet([base, full, staged]), out / "sheet.png")
    record = {"window": list(window), "num_steps": cfg.num_steps,
              "instruction": args.instruction}
    if args.reference:
        ref = resize(load_image(args.reference), staged.shape[:2])
        mask = np.any(base != ref, axis=-1)
        record["mask_pixels"] = int(mask.sum())
        record["staged_mask_delta"] = mask_delta(base, staged, mask)
        record["full_mask_delta"] = mask_delta(base, full, mask)
    (out / "metrics.json").write_text(json.dumps(record, sort_keys=True, indent=2) + "\n",
                                      encoding="utf-8")
    _write_provenance(out, "probe-prior", seed)
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import RubricJudge, aggregate_scores, classic_metrics, judge_edit, \
        load_suite
    from .images import save_png
    from .inference import sample_batch

    model, schedule, payload = _load_model(args.model)
    cfg = _guidance(args, payload)
    seed = args.seed if args.seed is not None else 0
    suite = load_suite(args.suite)
    if args.judge == "mock":
        judge = RubricJudge([(o, ins, ref) for o, ref, ins, _ in suite])
    else:
        from .forge import HttpVlmClient

        judge = HttpVlmClient.from_env(args.judge)
    out = _out_dir(args.out)
    outputs = sample_batch(model, schedule, [s[0] for s in suite], [s[2] for s in suite],
                           cfg, seed)
    scores, classic = [], []
    with open(out / "scores.jsonl", "w", encoding="utf-8") as fh:
        for i, ((orig, ref, instruction, task), edited) in enumerate(zip(suite, outputs)):
            if args.save_images:
                save_png(edited, out / "images" / f"{i:05d}.png")
            score = judge_edit(orig, edited, instruction, judge)
            scores.append(score)
            metrics = classic_metrics(orig, edited, ref, caption=instruction)
            classic.append(metrics)
            fh.write(json.dumps({"index": i, "instruction": instruction, "task_type": task,
                                 **score.to_dict(), "classic": metrics},
                                sort_keys=True) + "\n")
    report = aggregate_scores(scores, name=args.name or Path(args.model).parent.name)
    report.classic = {k: float(np.mean([c[k] for c in classic])) for k in classic[0]}
    (out / "report.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2)
                                     + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report.table() + "\n", encoding="utf-8")
    _write_provenance(out, "evaluate", seed, judge=args.judge, suite=str(args.suite))
    print(report.table())
    return 0


def cmd_report(args) -> int:
    from .evaluation import MetricReport, render_table

    root = Path(args.input)
    paths = sorted(root.glob("*/report.json"))
    if (root / "report.json").exists():
        paths.insert(0, root / "report.json")
    if not paths:
        raise ConfigError(f"no report.json under {root}")
    reports = []
    for p in paths:
        r = MetricReport(**json.loads(p.read_text(encoding="utf-8")))
        reports.append(replace(r, name=r.name or p.parent.name))
    table = render_table(reports)
    if args.out:
        out = _out_dir(args.out)
        (out / "comparison.txt").write_text(table + "\n", encoding="utf-8")
        (out / "comparison.json").write_text(
            json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=2) + "\n",
            encoding="utf-8")
    print(table)
    return 0


def cmd_synth_suite(args) -> int:
    from .dataset import write_source
    from .synth import synth_world

    pairs = synth_world(args.n, args.seed if args.seed is not None else 0)
    write_source(pairs, args.out, "synth-suite", instruction_attr="instruction")
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="instructedit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="repeat for more logging")
    p.add_argument("--threads", type=int, default=1,
                   help="torch threads; 1 (default) gives bit-identical reruns")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    b = sub.add_parser("build-data", help="build a rectified, contrastive dataset")
    b.add_argument("--config", help="flat YAML build config")
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--mock-vlm", metavar="FIXTURES",
                   help="fixture directory or responses.jsonl; 'synth' for synthetic truth")
    b.add_argument("--preset", choices=["5k", "10k", "20k", "40k", "desk"])
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_build_data)

    t = sub.add_parser("train", help="train the editing model")
    t.add_argument("--config", help="flat YAML config with TrainConfig keys")
    t.add_argument("--data", required=True, help="built dataset directory")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--resume", action="store_true", help="continue from out/checkpoint.pt")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    def guidance_flags(sp):
        sp.add_argument("--model", required=True, help="checkpoint path")
        sp.add_argument("--text-scale", type=float, default=10.0)
        sp.add_argument("--image-scale", type=float, default=1.5)
        sp.add_argument("--steps", type=int, default=50, help="DDIM steps")
        sp.add_argument("--size", type=int, default=None,
                        help="shorter side after resize (default: training size)")
        sp.add_argument("--seed", type=int)

    e = sub.add_parser("edit", help="edit one image")
    guidance_flags(e)
    e.add_argument("--image", required=True)
    e.add_argument("--instruction", required=True)
    e.add_argument("--out", required=True, help="output PNG path")
    e.set_defaults(func=cmd_edit)

    pr = sub.add_parser("probe-prior", help="apply the instruction only inside a step window")
    guidance_flags(pr)
    pr.add_argument("--image", required=True)
    pr.add_argument("--instruction", required=True)
    pr.add_argument("--window", required=True, help="sampler steps a:b (0 = most noised)")
    pr.add_argument("--reference", help="reference edited image for mask metrics")
    pr.add_argument("--out", required=True, help="output directory")
    pr.set_defaults(func=cmd_probe_prior, steps=30)

    ev = sub.add_parser("evaluate", help="judge a model on a suite")
    guidance_flags(ev)
    ev.add_argument("--suite", required=True, help="suite directory (source format)")
    ev.add_argument("--judge", default="mock", help="'mock' or a judge model id")
    ev.add_argument("--out", required=True)
    ev.add_argument("--name", help="row label in reports")
    ev.add_argument("--save-images", action="store_true")
    ev.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="compare evaluation runs")
    r.add_argument("--in", dest="input", required=True,
                   help="directory of evaluate outputs")
    r.add_argument("--out", help="write comparison files here")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("synth-suite", help="write a synthetic evaluation suite")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_suite)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no command given; see --help")
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2),
            format="%(levelname)s %(name)s: %(message)s",
        )
        import torch

        torch.set_num_threads(max(1, args.threads))
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except InstructEditError as exc:
        _emit_error(exc, exc.exit_code)
        return exc.exit_code
    except OSError as exc:
        _emit_error(exc, 3)
        return 3
    except (AssertionError, RuntimeError) as exc:
        _emit_error(exc, 5)
        return 5


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
