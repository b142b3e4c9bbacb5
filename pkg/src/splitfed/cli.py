"""Command-line experiment runner.

    splitfed run --config exp.cfg --rounds 20 --protocol sflg --groups 2
    splitfed validate --config exp.cfg
    splitfed variants

Every config key is also a flag (``--batch_size`` or ``--batch-size``).
Exit status: 0 on success, 2 on invalid configuration, 1 on runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import os
import subprocess
import sys
import tempfile
from dataclasses import fields

from . import protocols
from .config import ALIASES, ExperimentConfig, build, dump_config, load_config, validate
from .metrics import MetricsLog, write_csv
from .splitmodel import VARIANT_IDS, build_variant, dense_input, reduction_factor

log = logging.getLogger("splitfed")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


def _config_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    parent.add_argument("--config", "-c", help="flat key = value experiment file")
    parent.add_argument("--verbose", "-v", action="store_true")
    group = parent.add_argument_group("experiment keys (override the config file)")
    for f in fields(ExperimentConfig):
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        names += [f"--{alias}" for alias, target in ALIASES.items() if target == f.name]
        group.add_argument(*names, dest=f.name, default=None, metavar=f.type.upper())
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_flags()
    parser = argparse.ArgumentParser(prog="splitfed", description="Federated and split learning experiments.",
                                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("run", "run an experiment and write the metrics CSV"),
                       ("validate", "check a configuration and list every problem"),
                       ("show", "print the fully resolved configuration")):
        sub.add_parser(name, parents=[parent], help=text, allow_abbrev=False)
    sub.add_parser("variants", help="list the model variants")
    return parser


def _resolve(args) -> tuple[ExperimentConfig, list[str]]:
    overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig)}
    try:
        cfg, problems = load_config(args.config, overrides)
    except (OSError, ValueError, configparser.Error) as exc:
        return ExperimentConfig(), [f"config: {exc}"]
    return cfg, problems + validate(cfg)


def summary_line(cfg: ExperimentConfig, result: MetricsLog) -> str:
    last = result.records[-1].round if result.records else 0
    return (
        f"protocol={cfg.protocol} variant={cfg.variant} clients={cfg.clients} rounds={last} "
        f"final_accuracy={result.final_accuracy:.4f} client_bytes={result.total_client_bytes()} "
        f"output={cfg.output}"
    )


def _run_socket_all(cfg: ExperimentConfig, rc, groups) -> MetricsLog:
    """Serve in this process and spawn one client subprocess per client id."""
    children: list[subprocess.Popen] = []
    fd, path = tempfile.mkstemp(prefix="splitfed-", suffix=".cfg")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))

    def spawn(port: int):
        for k in range(cfg.clients):
            cmd = [sys.executable, "-m", "splitfed", "run", "--config", path, "--role", "client",
                   "--client_id", str(k), "--port", str(port), "--host", cfg.host]
            children.append(subprocess.Popen(cmd))

    try:
        result = protocols.serve_socket(rc, cfg.protocol, groups, cfg.host, cfg.port, on_listen=spawn,
                                        accept_timeout=60.0)
        codes = [c.wait(timeout=60) for c in children]
        if any(codes):
            raise protocols.ProtocolError(f"client processes exited with {codes}")
        return result
    finally:
        for c in children:
            if c.poll() is None:
                c.kill()
                c.wait()
        os.unlink(path)


def execute(cfg: ExperimentConfig) -> MetricsLog | None:
    """Run a validated config. Returns the log, or None for a client role."""
    rc, groups = build(cfg)
    if cfg.transport == "loopback":
        return protocols.run_loopback(rc, cfg.protocol, groups)
    if cfg.role == "client":
        protocols.client_socket(rc, cfg.protocol, cfg.client_id, cfg.host, cfg.port)
        return None
    if cfg.role == "server":
        return protocols.serve_socket(rc, cfg.protocol, groups, cfg.host, cfg.port)
    return _run_socket_all(cfg, rc, groups)


def run(cfg: ExperimentConfig, out=None) -> int:
    """Validate, execute, write the CSV and print one summary line."""
    out = out or sys.stdout
    problems = validate(cfg)
    if problems:
        for p in problems:
            print(f"invalid: {p}", file=sys.stderr)
        return EXIT_INVALID
    try:
        result = execute(cfg)
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if result is None:
        return EXIT_OK
    parent = os.path.dirname(os.path.abspath(cfg.output))
    os.makedirs(parent, exist_ok=True)
    write_csv(result, cfg.output)
    print(summary_line(cfg, result), file=out)
    return EXIT_OK


def list_variants(out) -> None:
    print(f"{'id':<16}{'cut shape':<14}{'dense input':<14}{'factor':<10}params", file=out)
    for vid in VARIANT_IDS:
        v = build_variant(vid)
        try:
            frac, _ = reduction_factor(v)
            factor = str(frac)
        except ValueError:
            factor = "-"
        length, ch = dense_input(v)
        cut = "x".join(map(str, v.split.cut_shape))
        print(f"{vid:<16}{cut:<14}{f'{length}x{ch}':<14}{factor:<10}{v.full.num_params()}", file=out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "variants":
        list_variants(sys.stdout)
        return EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg, problems = _resolve(args)
    if args.command == "show":
        sys.stdout.write(dump_config(cfg))
    if problems:
        for p in problems:
            print(f"invalid: {p}", file=sys.stderr)
        return EXIT_INVALID
    if args.command == "validate":
        print("ok")
        return EXIT_OK
    if args.command == "show":
        return EXIT_OK
    return run(cfg)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
