"""Regenerate data/{wine,iris,digits}.csv from the copies bundled with scikit-learn.

The UCI datasets ship inside scikit-learn, so no network access is needed.
Features are written as-is (no normalization); the label is the last column.

    python scripts/export_datasets.py [--out data]
"""
import argparse
import csv
from pathlib import Path

from sklearn.datasets import load_digits, load_iris, load_wine

LOADERS = {"wine": load_wine, "iris": load_iris, "digits": load_digits}


def _fmt(v):
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def export(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, loader in LOADERS.items():
        bunch = loader()
        path = out_dir / f"{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row, label in zip(bunch.data, bunch.target):
                writer.writerow([_fmt(v) for v in row] + [int(label)])
        print(f"{path}: {bunch.data.shape[0]} rows x {bunch.data.shape[1]} features")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data")
    export(parser.parse_args().out)
