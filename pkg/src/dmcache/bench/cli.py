"""``bench synth|trace|faults`` command line."""

import argparse
import sys

from .experiment import ExperimentConfig, ScriptedEvent, run_experiment
from .workload import WorkloadSpec


def _at(text):
    if not text.startswith("@"):
        raise argparse.ArgumentTypeError("expected @<op#>, got %r" % text)
    return int(text[1:])


def _kill_cn(text):
    try:
        cn, op = text.split("@")
        return int(cn), int(op)
    except ValueError:
        raise argparse.ArgumentTypeError("expected <id>@<op#>, got %r" % text) from None


def build_parser():
    p = argparse.ArgumentParser(prog="bench", description="Coherent CN-side cache benchmark "
                                "on a simulated disaggregated-memory fabric.")
    p.add_argument("mode", choices=("synth", "trace", "faults"))
    p.add_argument("--cns", type=int, default=8)
    p.add_argument("--clients-per-cn", type=int, default=16)
    p.add_argument("--read-ratio", type=float, default=0.95)
    p.add_argument("--zipf", type=float, default=0.99)
    p.add_argument("--obj-size", type=int, default=1024)
    p.add_argument("--objects", type=int, default=1_000_000)
    p.add_argument("--ops", type=int, default=100_000)
    p.add_argument("--coherence", default="difache",
                   choices=("difache", "difache-noac", "cmcache", "nocache"))
    p.add_argument("--owner-tracking", default="auto", choices=("broadcast", "ownerset", "auto"))
    p.add_argument("--seed", type=int, default=0)
    det = p.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true", default=True,
                     help="reproducible discrete-event schedule (default)")
    det.add_argument("--free-running", dest="deterministic", action="store_false",
                     help="randomly jittered, unseeded schedule")
    p.add_argument("--torn", action="store_true", help="inject torn multi-word writes")
    p.add_argument("--out", help="CSV output path (default stdout)")
    p.add_argument("--trace-file")
    p.add_argument("--kill-cn", type=_kill_cn, action="append", default=[], metavar="ID@OP")
    p.add_argument("--kill-mn", type=_at, action="append", default=[], metavar="@OP")
    p.add_argument("--recover", type=_at, action="append", default=[], metavar="@OP",
                   help="bring the memory node back at this op count")
    p.add_argument("--validate", action="store_true",
                   help="check the coherence history and report on stderr")
    return p


def config_from_args(args):
    spec = WorkloadSpec(cns=args.cns, clients_per_cn=args.clients_per_cn,
                        read_ratio=args.read_ratio, zipf_alpha=args.zipf,
                        object_size=args.obj_size, object_count=args.objects,
                        total_ops=args.ops, seed=args.seed)
    events = [ScriptedEvent(op, "kill-cn", cn) for cn, op in args.kill_cn]
    events += [ScriptedEvent(op, "kill-mn") for op in args.kill_mn]
    events += [ScriptedEvent(op, "recover-mn") for op in args.recover]
    if args.mode == "faults" and not events:
        # default timeline: lose a CN, then the MN, then bring the MN back
        n = args.ops
        events = [ScriptedEvent(n * 3 // 10, "kill-cn", min(1, args.cns - 1)),
                  ScriptedEvent(n // 2, "kill-mn"),
                  ScriptedEvent(n * 6 // 10, "recover-mn")]
    if args.mode == "trace" and not args.trace_file:
        raise SystemExit("bench trace needs --trace-file")
    return ExperimentConfig(workload=spec, coherence=args.coherence,
                            owner_tracking=args.owner_tracking,
                            deterministic=args.deterministic, torn=args.torn,
                            trace_file=args.trace_file if args.mode == "trace" else None,
                            events=events, record_history=args.validate)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        res = run_experiment(cfg)
    except (ValueError, FileNotFoundError) as err:
        print("bench: %s" % err, file=sys.stderr)
        return 2
    text = res.csv
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.validate:
        v = res.validate()
        print("validator: %s (%d reads checked)%s" % (
            "pass" if v.ok else "FAIL", v.checked, "" if v.ok else "; " + str(v.first)),
            file=sys.stderr)
        if not v.ok:
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
