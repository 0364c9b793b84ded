"""Command-line entry point: ``intentflow run|replay-learning|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .lm_gateway import FixtureError, UnscriptedPrompt
from .scenario import NoLearningPair, ScenarioError, replay_learning, run_scenario


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="campus seed")
    p.add_argument("--theta1", type=float, help="urgency threshold in seconds")
    p.add_argument("--theta2", type=float, help="solution-recall similarity threshold")
    p.add_argument("--candidates", type=int, help="low-urgency candidate count")
    p.add_argument("--tick", type=int, dest="tick_seconds", help="monitoring tick in seconds")


def _overrides(args: argparse.Namespace) -> dict:
    return {k: getattr(args, k) for k in ("seed", "theta1", "theta2", "candidates", "tick_seconds")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intentflow", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario end to end")
    run.add_argument("scenario", type=Path)
    run.add_argument("--out", type=Path, help="run directory (default: runs/<scenario name>)")
    _add_overrides(run)

    replay = sub.add_parser("replay-learning", help="compare pre- and post-learning rounds")
    replay.add_argument("scenario", type=Path)
    replay.add_argument("--out", type=Path)
    _add_overrides(replay)

    rep = sub.add_parser("report", help="summarise a run directory")
    rep.add_argument("run_dir", type=Path)
    return parser


def _summarise(data: dict) -> str:
    lines = [f"scenario {data['scenario']} (seed {data['campus_seed']})"]
    for item in data["intents"]:
        line = f"  {item['id']}: urgency={item['urgency']} prefs={item.get('preference_source')}"
        if "selected" in item:
            line += f" selected={item['selected']} sub_tasks={len(item['sub_tasks'])} commands={len(item.get('commands', []))}"
        if "pareto_front" in item:
            line += f" front={','.join(item['pareto_front'])}"
        lines.append(line)
    ledger = data["ledger"]
    lines.append(f"  lm calls: {ledger['total']} " + " ".join(f"{k}={v}" for k, v in ledger["counts"].items()))
    lines.append(f"  dispatched: {len(data['dispatched'])}  monitoring events: {len(data['monitoring']['events'])}")
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            report = run_scenario(args.scenario, **_overrides(args))
            out = report.write(args.out or Path("runs") / report.data["scenario"])
            print(_summarise(report.data))
            print(f"  wall time: {report.wall_time_s:.3f} s")
            print(f"report written to {out}")
        elif args.command == "replay-learning":
            replay = replay_learning(args.scenario, **_overrides(args))
            if args.out:
                replay.report.write(args.out)
                (args.out / "learning.txt").write_text(
                    json.dumps(replay.summary(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
            print(json.dumps(replay.summary(), sort_keys=True, indent=2))
        else:
            data = json.loads((args.run_dir / "report.txt").read_text(encoding="utf-8"))
            print(_summarise(data))
    except UnscriptedPrompt as exc:
        print(f"error: no scripted response for {exc.key}", file=sys.stderr)
        return 2
    except (ScenarioError, FixtureError, NoLearningPair, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
