"""Command line entry point.

Every verb runs in-process by default. With ``--server URL`` the verbs that do
real work (run, fuse, eval, gen) are forwarded to a running ``sparsefed serve``
and the CLI only reads inputs and writes outputs.

Exit codes: 0 success, 1 invalid input (config, data, arguments), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from . import __version__
from .autoencoder import ModelError, ParameterVector
from .config import ConfigError, ExperimentConfig, SyntheticSource, parse_config
from .data import DataError, save_csv
from .fusion import (
    FusionConfig,
    FusionError,
    admm_sparse_fuse,
    average_fuse,
    closed_form_sparse_fuse,
    compression_rate,
    extract_mask,
)
from .report import ExperimentReport, emit_report, summary_table

logger = logging.getLogger("sparsefed")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
DEFAULT_OUT = "sparsefed-out"


class UsageError(Exception):
    """Bad command line; mapped to exit code 1."""


class RemoteError(Exception):
    def __init__(self, status: int, detail):
        super().__init__(f"server answered {status}: {detail}")
        self.status = status


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime errors here
    def error(self, message):
        raise UsageError(message)


# --- remote helpers -----------------------------------------------------------

def _post(server: str, path: str, payload: dict, timeout: Optional[float] = None):
    import httpx

    resp = httpx.post(server.rstrip("/") + path, json=payload, timeout=timeout)
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail")
        except ValueError:
            detail = resp.text
        raise RemoteError(resp.status_code, detail)
    return resp


def _decode(text: str) -> ParameterVector:
    from .service.schemas import decode_model

    return decode_model(text)


def _encode(model: ParameterVector) -> str:
    from .service.schemas import encode_model

    return encode_model(model)


# --- verbs --------------------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def _out_dir(args, cfg: Optional[ExperimentConfig] = None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(DEFAULT_OUT)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    if args.server:
        body = _post(args.server, "/experiments/run", cfg.model_dump(mode="json", by_alias=True)).json()
        report = ExperimentReport.model_validate(body["report"])
        model = _decode(body["model"])
    else:
        from .experiment import train_and_report

        report, model = train_and_report(cfg, threads=args.threads,
                                         checkpoint_dir=out / "checkpoint", resume=args.resume)
    emit_report(report, out)
    model.save(out / "model.bin")
    print(summary_table([report]), end="")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    models = [ParameterVector.load(p) for p in args.models]
    if args.server:
        payload = dict(models=[_encode(m) for m in models], method=args.method, b=args.b,
                       tol=args.tol, max_iters=args.max_iters)
        payload["lambda"] = args.lam
        body = _post(args.server, "/fuse", payload).json()
        fused, iterations, converged = _decode(body["model"]), body["iterations"], body["converged"]
    else:
        if args.method == "average":
            fused, iterations, converged = average_fuse(models), 0, True
        elif args.method == "closed_form":
            fused, iterations, converged = closed_form_sparse_fuse(models, args.lam), 0, True
        else:
            res = admm_sparse_fuse(models, FusionConfig(args.lam, args.b, args.max_iters, args.tol))
            fused, iterations, converged = res.model, res.iterations, res.converged
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fused.save(out)
    summary = dict(method=args.method, models=len(models), iterations=iterations, converged=converged,
                   compression_rate=compression_rate(fused), nonzero_params=extract_mask(fused).support)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK if converged else EXIT_RUNTIME


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = ParameterVector.load(args.model)
    if args.server:
        body = _post(args.server, "/eval", dict(config=cfg.model_dump(mode="json", by_alias=True),
                                                model=_encode(model))).json()
    else:
        from .experiment import evaluate_model
        from .report import DetectionResult

        result = evaluate_model(cfg, model)
        key = "detection" if isinstance(result, DetectionResult) else "imputation"
        body = {key: result.model_dump(mode="json"),
                "compression_rate": compression_rate(model, cfg.fusion.zero_tol),
                "nonzero_params": extract_mask(model, cfg.fusion.zero_tol).support}
    body = {k: v for k, v in body.items() if v is not None}
    text = json.dumps(body, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_gen(args) -> int:
    if args.config:
        cfg = _load_config(args)
        if cfg.data.synthetic is None:
            raise UsageError("gen needs a config with a data.synthetic section")
        source = cfg.data.synthetic
        if args.seed is not None:
            source = source.model_copy(update={"seed": args.seed})
    else:
        source = SyntheticSource(n_features=args.features, n_steps=args.steps, noise_std=args.noise,
                                 seed=args.seed or 0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.server:
        out.write_text(_post(args.server, "/generate", source.model_dump(mode="json")).text)
    else:
        from .synthetic import generate_synthetic

        save_csv(generate_synthetic(source.to_spec()), out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(threads_per_job=args.threads), host=args.host, port=args.port,
                log_level="info")
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparsefed", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(p, config_required):
        p.add_argument("--config", required=config_required, help="YAML or JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output path")
        p.add_argument("--threads", type=int, default=1, help="worker threads for client updates")
        p.add_argument("--server", default=None, help="forward the work to a running service at this URL")

    p = sub.add_parser("run", help="train the federation and write a report")
    common(p, True)
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("fuse", help="fuse serialized parameter vectors")
    common(p, False)
    p.add_argument("models", nargs="+", help="model files written by run or fuse")
    p.add_argument("--method", choices=("admm", "closed_form", "average"), default="admm")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iters", type=int, default=500)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="score a saved model on the config's data")
    common(p, True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen", help="write a synthetic sensor dataset as CSV")
    common(p, False)
    p.add_argument("--features", type=int, default=8)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--noise", type=float, default=0.1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--threads", type=int, default=1, help="worker threads per experiment job")
    p.set_defaults(func=cmd_serve)
    return parser


def _check(args) -> None:
    if getattr(args, "threads", 1) < 1:
        raise UsageError("--threads must be >= 1")
    if args.verb == "fuse" and not args.out:
        raise UsageError("fuse needs --out FILE")
    if args.verb == "gen" and not args.out:
        raise UsageError("gen needs --out FILE")
    if args.verb == "fuse" and (args.lam < 0 or args.b <= 0):
        raise UsageError("--lambda must be >= 0 and --b > 0")


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _check(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sparsefed: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print("invalid config:", file=sys.stderr)
        for v in exc.violations:
            print(f"  {v}", file=sys.stderr)
        return EXIT_INVALID
    except (UsageError, DataError, ModelError, ValidationError, FileNotFoundError) as exc:
        print(f"sparsefed: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RemoteError as exc:
        print(f"sparsefed: {exc}", file=sys.stderr)
        return EXIT_INVALID if 400 <= exc.status < 500 else EXIT_RUNTIME
    except (FusionError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"sparsefed: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # httpx transport errors and anything unforeseen
        logger.debug("unhandled", exc_info=True)
        print(f"sparsefed: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
