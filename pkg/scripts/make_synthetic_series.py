from __future__ import annotations

import argparse
from pathlib import Path

from dotenv import load_dotenv

from pacdrgp.adapters.csv_dataset import CsvDatasetAdapter
from pacdrgp.domain.experiment_models import make_synthetic_series
from pacdrgp.domain.revarb_model import Dataset

_REPO_ROOT = Path(__file__).resolve().parents[1]


def _write_rounded(path: Path, num_states: int, seed: int, noise_std: float) -> None:
    series = make_synthetic_series(num_states, seed=seed, noise_std=noise_std)
    lines = ["t,u_1,y"]
    for t, u, y in zip(series.times, series.inputs[:, 0], series.outputs):
        lines.append(f"{int(t)},{u:.6f},{y:.6f}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def main() -> None:
    load_dotenv(_REPO_ROOT / ".env", override=False)
    parser = argparse.ArgumentParser(description="Regenerate the bundled actuator-like series.")
    parser.add_argument("--states", type=int, default=512)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--noise-std", type=float, default=0.0)
    parser.add_argument("--output", type=Path, default=_REPO_ROOT / "data" / "synthetic_actuator_512.csv")
    parser.add_argument("--full-precision", action="store_true", help="write repr() floats through the dataset adapter")
    args = parser.parse_args()
    if args.full_precision:
        series = make_synthetic_series(args.states, seed=args.seed, noise_std=args.noise_std)
        dataset = Dataset(times=series.times, exogenous=series.inputs, outputs=series.outputs)
        CsvDatasetAdapter().save_dataset(dataset, args.output)
    else:
        _write_rounded(args.output, args.states, args.seed, args.noise_std)
    print(f"wrote {args.states} states to {args.output}")


if __name__ == "__main__":
    main()
