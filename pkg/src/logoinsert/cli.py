"""Command-line entry point.

Exit codes: 0 success, 1 stage failure, 2 usage error, 3 invalid config.
Failures print one JSON error record on stderr (and append it to
``<workdir>/errors.jsonl`` when the run directory is known).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import pipeline
from .errors import ConfigError, LogoInsertError

log = logging.getLogger("logoinsert")

EXIT_OK, EXIT_STAGE, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        out = {"ts": round(record.created, 3), "level": record.levelname.lower(), "logger": record.name,
               "msg": record.getMessage()}
        if record.exc_info:
            out["exc"] = self.formatException(record.exc_info)
        return json.dumps(out)


def _setup_logging(verbose: int) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING)


def _error_record(command: str, exc: BaseException, code: int) -> dict:
    rec = {"ok": False, "command": command, "exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    for attr in ("path", "fields", "checkpoint"):
        value = getattr(exc, attr, None)
        if value:
            rec[attr] = value if not isinstance(value, Path) else str(value)
    return rec


def _toy_assets(args) -> dict:
    """Procedural logo, scenes, relation dataset, pretrained toy base and a ready-to-run config."""
    from .backend import save_checkpoint
    from .backend.pretrain import pretrained_toy
    from .core import RunConfig, save_run_config, write_png
    from .fixtures import make_logo, write_relation_dataset, write_scenes

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "logo.png", make_logo(32, args.seed))
    write_scenes(out / "scenes", count=5, size=64, seed=args.seed, brightness="bright")
    write_relation_dataset(out / "relation_data", num_classes=20, seed=args.seed)
    paths = {"workdir": "run", "logo": "logo.png", "scenes_dir": "scenes",
             "relation_manifest": "relation_data/relation.jsonl"}
    if args.base_steps > 0:
        base = pretrained_toy(steps=args.base_steps, cache_dir=args.cache_dir)
        save_checkpoint(base, out / "base", meta={})
        paths["base_checkpoint"] = "base"
    config = RunConfig.model_validate({"seed": args.seed, "paths": paths})
    save_run_config(config, out / "config.yaml")
    return {"ok": True, "command": "toy-assets", "config": str(out / "config.yaml")}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="logoinsert", description="Logo insertion customization pipeline")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def stage(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="run config (YAML)")
        return sp

    sp = stage("synth", "build the token-binding and identity-learning sets")
    sp.add_argument("--logo", help="override paths.logo")
    sp.add_argument("--scenes", help="override paths.scenes_dir")
    sp.add_argument("--binding-count", type=int)
    sp.add_argument("--identity-count", type=int)
    sp.add_argument("--threshold", type=float, help="luminance contrast threshold")
    sp.add_argument("--seed", type=int)
    stage("pretrain-relation", "actor-critic pre-training of the relation token")
    stage("bind-token", "optimize the identity token on the binding set")
    stage("learn-identity", "fine-tune the denoiser on the identity set")
    sp = stage("attn", "cross-attention maps and localization scores")
    sp.add_argument("--checkpoint", default="bind", choices=["relation", "bind", "identity"])
    sp.add_argument("--limit", type=int, default=8, help="number of binding-set images")
    sp = stage("eval", "CLIP-T / CLIP-I / DINO over the context x seed grid")
    sp.add_argument("--checkpoint", default="identity", choices=["relation", "bind", "identity"])
    sp = stage("report", "render the static run report")
    sp.add_argument("--out", default=None, help="report directory (default: <workdir>/report)")

    sp = sub.add_parser("toy-assets", help="write procedural inputs and a config for a toy run")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--base-steps", type=int, default=6000, help="toy base pretraining steps (0: none)")
    sp.add_argument("--cache-dir", default=None)
    return p


STAGES = {
    "synth": lambda run, a: pipeline.stage_synth(run.with_overrides({
        "paths.logo": a.logo and str(Path(a.logo).resolve()),
        "paths.scenes_dir": a.scenes and str(Path(a.scenes).resolve()),
        "synth.binding_count": a.binding_count, "synth.identity_count": a.identity_count,
        "synth.threshold": a.threshold, "seed": a.seed})),
    "pretrain-relation": lambda run, a: pipeline.stage_pretrain_relation(run),
    "bind-token": lambda run, a: pipeline.stage_bind_token(run),
    "learn-identity": lambda run, a: pipeline.stage_learn_identity(run),
    "attn": lambda run, a: pipeline.stage_attn(run, a.checkpoint, a.limit),
    "eval": lambda run, a: pipeline.stage_eval(run, a.checkpoint),
    "report": lambda run, a: pipeline.stage_report(run, a.out),
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    _setup_logging(args.verbose)

    run = None
    try:
        if args.command == "toy-assets":
            print(json.dumps(_toy_assets(args)))
            return EXIT_OK
        try:
            run = pipeline.Run.from_file(args.config)
        except LogoInsertError as e:
            raise ConfigError(str(e)) from e
        t0 = time.time()
        record = STAGES[args.command](run, args)
        print(json.dumps({"ok": True, "command": args.command, "seconds": round(time.time() - t0, 2),
                          "outputs": record.outputs}, sort_keys=True))
        return EXIT_OK
    except ConfigError as e:
        code = EXIT_CONFIG
        err = e
    except (LogoInsertError, OSError, ValueError) as e:
        code = EXIT_STAGE
        err = e
    rec = _error_record(args.command, err, code)
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    if run is not None:
        try:
            run.workdir.mkdir(parents=True, exist_ok=True)
            with (run.workdir / "errors.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({**rec, "ts": round(time.time(), 3)}, sort_keys=True) + "\n")
        except OSError:
            pass
    return code


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
