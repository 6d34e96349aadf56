#!/usr/bin/env python3
"""
Write a small CIFAR-10 style directory from synthetic images, for trying the
cifar10 code path without downloading the real dataset.
"""

import argparse
import sys
from pathlib import Path

# Add the repository root to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from siamsearch.data import CIFAR_TEST_FILE, CIFAR_TRAIN_FILES, synth_dataset, write_cifar10_bin


def make_fixture(out_dir: Path, records: int = 200, seed: int = 0) -> None:
    """Five training batches and one test batch of `records` images each."""
    print(f"Writing CIFAR-10 fixture to {out_dir}...")
    for i, name in enumerate(CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,)):
        dataset = synth_dataset(seed + i, records, num_classes=10, size=32)
        path = write_cifar10_bin(dataset, out_dir / name)
        print(f"  {path.name}: {len(dataset)} records, {path.stat().st_size} bytes")
    print("\nDone! Point data.path at this directory and set data.kind = \"cifar10\".")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", type=Path, nargs="?", default=Path("data/cifar-10-fixture"))
    parser.add_argument("--records", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    make_fixture(args.out_dir, args.records, args.seed)
