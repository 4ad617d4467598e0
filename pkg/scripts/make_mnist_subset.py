"""Build the 2000/500 MNIST IDX subset from the digits CSV shipped with mlxtend."""

import argparse
from pathlib import Path

from robattr.data import mnist_subset_from_csv


def bundled_csv() -> Path:
    import mlxtend

    return Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz"


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "mnist_subset"))
    p.add_argument("--csv", default=None, help="CSV with 784 pixel columns then the label")
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--test", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    paths = mnist_subset_from_csv(args.csv or bundled_csv(), args.out, args.train, args.test, args.seed)
    for k, v in paths.items():
        print(f"{k}: {v}")


if __name__ == "__main__":
    main()
