"""``convasr`` command line.

Stage subcommands (``train-lm``, ``rescore``, ``cn``, ``combine``, ``run``)
run the pipeline up to and including the named stage; every stage is
deterministic, so re-running earlier stages reproduces their artifacts.
Exit status is 0 on success and the error class's ``exit_code`` otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from ..errors import ConvAsrError, InvalidConfig, IoError
from ..score import rate_table, read_references, score_corpus
from .config import STAGES, PipelineConfig, StageToggles
from .run import run_pipeline, verify_manifest
from .synth import gen_synthetic

STAGE_COMMANDS = {"train-lm": "lm", "rescore": "rescore", "cn": "cn", "combine": "combine",
                  "run": None}


def _config(args):
    cfg = PipelineConfig.read(args.config) if args.config else PipelineConfig()
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.jobs is not None:
        kw["jobs"] = args.jobs
    if getattr(args, "out", None):
        kw["out_dir"] = args.out
    if getattr(args, "data", None):
        kw["data_dir"] = args.data
    return dataclasses.replace(cfg, **kw) if kw else cfg


def _upto(cfg, last):
    if last is None:
        return cfg
    keep = STAGES[:STAGES.index(last) + 1]
    toggles = StageToggles(**{s: (s in keep and cfg.stages.enabled(s)) for s in STAGES})
    return dataclasses.replace(cfg, stages=toggles)


def cmd_gen(args):
    cfg = _config(args)
    out = args.out or os.path.join(cfg.out_dir, "data")
    world = gen_synthetic(cfg.world, out)
    print(f"wrote {sum(len(u) for u in world.splits.values())} utterances and "
          f"{len(world.systems)} systems' N-best lists to {out}")


def cmd_train_am(args):
    from .amtrain import train_world_am
    from .synth import build_world, load_world

    cfg = _config(args)
    world = load_world(cfg.data_dir) if cfg.data_dir else build_world(cfg.world)
    model, _, summary = train_world_am(world, cfg.am)
    out = os.path.join(cfg.out_dir, "am")
    try:
        os.makedirs(out, exist_ok=True)
        model.save(os.path.join(out, "model.json"))
        with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as f:
            f.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise IoError(str(e)) from e
    print(f"dev frame accuracy {summary['dev_frame_accuracy']:.4f}; neighbor correlation "
          + " ".join(f"{c:.4f}" for c in summary["neighbor_correlation"]))


def cmd_stage(args):
    cfg = _upto(_config(args), STAGE_COMMANDS[args.command])
    run_pipeline(cfg)
    with open(os.path.join(cfg.out_dir, "report.txt"), encoding="utf-8") as f:
        sys.stdout.write(f.read())


def cmd_score(args):
    refs = read_references(args.ref)
    hyps = read_references(args.hyp)
    missing = set(hyps) - set(refs)
    if missing:
        raise InvalidConfig(f"hypotheses for unknown utterances: {sorted(missing)[:5]}")
    rep, _ = score_corpus(refs, hyps)
    if args.json:
        print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    else:
        sys.stdout.write(rate_table({os.path.basename(args.hyp): rep}))


def cmd_report(args):
    out = args.out or _config(args).out_dir
    stages = verify_manifest(out)
    path = os.path.join(out, "report.txt")
    try:
        with open(path, encoding="utf-8") as f:
            sys.stdout.write(f.read())
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    print("manifests verified: " + " -> ".join(stages))


def build_parser():
    p = argparse.ArgumentParser(prog="convasr", description="Desk-scale conversational ASR back end on a synthetic world.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--jobs", type=int, help="worker processes for parallel stages")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate the synthetic world")
    g.add_argument("--out", help="output directory (default <out_dir>/data)")
    g.set_defaults(fn=cmd_gen)

    a = sub.add_parser("train-am", parents=[common], help="train the toy acoustic model")
    a.add_argument("--data", help="generated world directory")
    a.add_argument("--out", help="run directory")
    a.set_defaults(fn=cmd_train_am)

    for name in STAGE_COMMANDS:
        what = "run every enabled stage" if name == "run" else f"run the pipeline through {name}"
        s = sub.add_parser(name, parents=[common], help=what)
        s.add_argument("--data", help="generated world directory (default: generate)")
        s.add_argument("--out", help="run directory")
        s.set_defaults(fn=cmd_stage)

    sc = sub.add_parser("score", parents=[common], help="score hypotheses against references")
    sc.add_argument("--ref", required=True)
    sc.add_argument("--hyp", required=True)
    sc.add_argument("--json", action="store_true")
    sc.set_defaults(fn=cmd_score)

    r = sub.add_parser("report", parents=[common], help="verify manifests and print the report")
    r.add_argument("--out", help="run directory")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except ConvAsrError as e:
        print(f"convasr: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"convasr: {e}", file=sys.stderr)
        return IoError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
