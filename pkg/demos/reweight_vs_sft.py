"""Pretrain on defected videos, then compare plain SFT with reward reweighting.

Runs in a few minutes on one core:

    python demos/reweight_vs_sft.py --seed 0
"""

import argparse
import time

from flowforge import evalbench as eb
from flowforge import promptengine as pe
from flowforge import rewardlab as rl
from flowforge import trainer as tr


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=120, help="pretrain epochs")
    args = ap.parse_args()

    t0 = time.perf_counter()
    base, _ = tr.pretrain(tr.PretrainConfig(seed=args.seed, epochs=args.epochs))
    print(f"pretrained in {time.perf_counter() - t0:.0f}s")

    records = pe.build_dataset(pe.DataMixConfig(seed=args.seed), base)
    rl.score_dataset(records)
    kept = len(rl.filter_dataset(records))
    print(f"{len(records)} records, {kept} with a usable reward")

    results = {"base": eb.evaluate(base)}
    for strategy in ("sft", "reweight_offline"):
        params, report = tr.train(records, base, tr.TrainConfig(strategy=strategy, seed=args.seed))
        results[strategy] = eb.evaluate(params)
        print(f"{strategy}: {len(report.losses)} steps in {report.epoch_seconds[0]:.1f}s")

    print()
    w = [max(len(d), 6) + 2 for d in pe.DIMENSIONS]
    print(f"{'model':18s}" + "".join(d.rjust(n) for d, n in zip(pe.DIMENSIONS, w)))
    for name, res in results.items():
        print(f"{name:18s}" + "".join(eb.fmt_cell(res[d].mean_score_percent).rjust(n) for d, n in zip(pe.DIMENSIONS, w)))


if __name__ == "__main__":
    main()
