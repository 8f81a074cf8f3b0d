"""Command line front end.

Three subcommands:

* keygen        derive the pre-distributed identity registry for a scenario
* run           execute a scenario, emit metrics.json and trace.tsv
* verify-trace  re-run a scenario and check a previously written trace

`run` exits 1 when a secure-mode run ends with any attack judged successful
(that is the regression signal); baseline runs are expected to be harmed and
exit 0. Malformed scenarios exit 2 without writing anything.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import identity, scenario, sim
from .crypto import derive_seed, generate_node_keys

_DISPOSITION_PREFIX = "dropped_by_receiver("


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="manetsec",
        description="deterministic ad hoc network simulator with "
                    "identity-authenticated routing and transport")
    sub = p.add_subparsers(dest="command", required=True)

    kg = sub.add_parser("keygen",
                        help="print the identity registry a scenario implies")
    kg.add_argument("--scenario", required=True, metavar="FILE")
    kg.add_argument("--seed", type=int, default=None,
                    help="override the scenario seed")
    kg.add_argument("--out", metavar="FILE", default=None,
                    help="write registry JSON here instead of stdout")
    kg.set_defaults(fn=cmd_keygen)

    rn = sub.add_parser("run", help="execute a scenario")
    rn.add_argument("--scenario", required=True, metavar="FILE")
    rn.add_argument("--mode", choices=scenario.MODES, default=None,
                    help="override the scenario's mode")
    rn.add_argument("--sec-level", type=int, choices=(0, 1), default=None,
                    help="override the scenario's security level")
    rn.add_argument("--seed", type=int, default=None,
                    help="override the scenario seed")
    rn.add_argument("--out", metavar="DIR", default=None,
                    help="write metrics.json and trace.tsv into this "
                         "directory (default: metrics to stdout)")
    rn.set_defaults(fn=cmd_run)

    vt = sub.add_parser("verify-trace",
                        help="re-run a scenario and compare against a saved "
                             "trace")
    vt.add_argument("--scenario", required=True, metavar="FILE")
    vt.add_argument("--trace", required=True, metavar="FILE")
    vt.add_argument("--mode", choices=scenario.MODES, default=None)
    vt.add_argument("--sec-level", type=int, choices=(0, 1), default=None)
    vt.add_argument("--seed", type=int, default=None)
    vt.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except scenario.ScenarioError as err:
        print("error: %s" % err, file=sys.stderr)
        return 2


def cmd_keygen(args) -> int:
    sc = scenario.parse(scenario.load_file(args.scenario))
    seed = sc.seed if args.seed is None else args.seed
    reg = identity.Registry()
    for name in sc.nodes:
        sig, enc = generate_node_keys(derive_seed(seed, "keys", name),
                                      sc.key_bits)
        reg.add(identity.NodeIdentity(identity.derive_id(sig.public),
                                      sig.public, enc.public, name))
    text = identity.registry_to_json(reg)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print("wrote %s (%d identities)" % (args.out, len(sc.nodes)),
              file=sys.stderr)
    else:
        sys.stdout.write(text)
    return 0


def cmd_run(args) -> int:
    result = scenario.run_scenario(scenario.load_file(args.scenario),
                                   mode=args.mode, sec_level=args.sec_level,
                                   seed=args.seed)
    metrics = result.metrics_json()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.json"), "w",
                  encoding="utf-8") as fh:
            fh.write(metrics)
        with open(os.path.join(args.out, "trace.tsv"), "w",
                  encoding="utf-8") as fh:
            fh.write(result.trace_text())
        print("wrote %s and %s" % (os.path.join(args.out, "metrics.json"),
                                   os.path.join(args.out, "trace.tsv")),
              file=sys.stderr)
    else:
        sys.stdout.write(metrics)

    verdicts = result.metrics.attack_verdicts
    if verdicts:
        print("verdicts: " + ", ".join("%s=%s" % kv
                                       for kv in sorted(verdicts.items())),
              file=sys.stderr)
    if result.scenario.mode == "secure":
        broken = sorted(k for k, v in verdicts.items() if v == "succeeded")
        if broken:
            print("FAIL: attack(s) succeeded against the secure "
                  "configuration: %s" % ", ".join(broken), file=sys.stderr)
            return 1
    return 0


def _lint_trace(text: str):
    """Structural problems in a trace file, as a list of messages."""
    known_kinds = sim.ROUTING_KINDS | sim.SEGMENT_KINDS | {"RAW"}
    problems = []
    last_tick = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split("\t")
        if len(parts) != 6:
            problems.append("line %d: expected 6 tab-separated fields, got %d"
                            % (lineno, len(parts)))
            continue
        tick_s, src, dst, kind, size_s, disp = parts
        if not tick_s.isdigit():
            problems.append("line %d: tick is not an integer" % lineno)
            continue
        tick = int(tick_s)
        if tick < last_tick:
            problems.append("line %d: ticks must not decrease" % lineno)
        last_tick = tick
        if not src or not dst:
            problems.append("line %d: empty endpoint name" % lineno)
        if kind not in known_kinds:
            problems.append("line %d: unknown message kind %r"
                            % (lineno, kind))
        if not size_s.isdigit():
            problems.append("line %d: size is not an integer" % lineno)
        if disp not in ("delivered", "lost") and not (
                disp.startswith(_DISPOSITION_PREFIX) and disp.endswith(")")):
            problems.append("line %d: unrecognized disposition %r"
                            % (lineno, disp))
    return problems


def cmd_verify(args) -> int:
    try:
        with open(args.trace, "r", encoding="utf-8") as fh:
            recorded = fh.read()
    except OSError as err:
        print("error: cannot read trace: %s" % err, file=sys.stderr)
        return 2
    problems = _lint_trace(recorded)
    if problems:
        for msg in problems[:10]:
            print("lint: %s" % msg, file=sys.stderr)
        print("trace file is structurally invalid", file=sys.stderr)
        return 1
    result = scenario.run_scenario(scenario.load_file(args.scenario),
                                   mode=args.mode, sec_level=args.sec_level,
                                   seed=args.seed)
    fresh = result.trace_text()
    if fresh == recorded:
        print("trace matches the re-run (%d records)"
              % len(result.net.trace), file=sys.stderr)
        return 0
    old_lines = recorded.splitlines()
    new_lines = fresh.splitlines()
    for i, (a, b) in enumerate(zip(old_lines, new_lines), start=1):
        if a != b:
            print("first difference at line %d:\n  recorded: %s\n  re-run:   "
                  "%s" % (i, a, b), file=sys.stderr)
            break
    else:
        print("trace length differs: recorded %d lines, re-run %d lines"
              % (len(old_lines), len(new_lines)), file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
