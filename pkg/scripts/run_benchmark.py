"""
Script to run the whole synthetic benchmark in one go.
Generates a panel with a known truth, fits every model and assembles the
comparison tables.
"""

import argparse
import sys
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.cli import main as nfdemand
from src.utils.logger import get_logger

logger = get_logger(__name__)

PIPELINE = [
    "synth",
    "filter",
    "fit-nf",
    "fit-hpf",
    "fit-logit",
    "evaluate",
    "events",
    "placebo",
    "elasticity",
    "target",
    "report",
]


def run_pipeline(common, skip=(), plots=False) -> int:
    """Run every stage in order; stop at the first failure."""
    for command in PIPELINE:
        if command in skip:
            print(f"- {command}: skipped")
            continue
        print(f"\n=== {command} ===")
        argv = [command, *common]
        if command == "report" and plots:
            argv.append("--plots")
        code = nfdemand(argv)
        if code != 0:
            logger.error(f"{command} failed with exit code {code}")
            print(f"✗ {command} failed (exit {code})")
            return code
        print(f"✓ {command}")
    return 0


def main():
    parser = argparse.ArgumentParser(description="Run the synthetic benchmark end to end")
    parser.add_argument('--config', type=Path, help='JSON run configuration')
    parser.add_argument('--seed', type=int, help='Random seed')
    parser.add_argument('--out', type=Path, help='Output root')
    parser.add_argument('--threads', type=int, default=1)
    parser.add_argument('--skip', nargs='+', default=[], choices=PIPELINE, help='Stages to skip')
    parser.add_argument('--plots', action='store_true', help='Render figures in the report')
    args = parser.parse_args()

    common = ["--threads", str(args.threads)]
    if args.config:
        common += ["--config", str(args.config)]
    if args.seed is not None:
        common += ["--seed", str(args.seed)]
    if args.out:
        common += ["--out", str(args.out)]

    print("=" * 60)
    print("NESTED FACTORIZATION SYNTHETIC BENCHMARK")
    print("=" * 60)
    code = run_pipeline(common, skip=set(args.skip), plots=args.plots)
    if code == 0:
        print("\n" + "=" * 60)
        print("✓ Benchmark complete")
        print("=" * 60)
    return code


if __name__ == "__main__":
    sys.exit(main())
