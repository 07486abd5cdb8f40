"""Predicted SKR of one link as the link-loss input is swept.

Trains on links 1, 2 and 4 and predicts link 3 with its link-loss feature
replaced by each sweep value. Writes one mean-prediction row per value and
per-row predictions for plotting.
"""
import argparse

import numpy as np

from _common import link_frame, out_dir
from cowqkd import data_pipeline as dp, mlp


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--losses", default="40,43,46,50,57")
    ap.add_argument("--out", default="results/link_loss_sweep")
    args = ap.parse_args()
    out = out_dir(args.out)
    frames = {i: link_frame(i)[0] for i in (1, 2, 3, 4)}
    model = mlp.train(mlp.init(mlp.MlpTopology(), args.seed), [frames[i] for i in (1, 2, 4)],
                      mlp.TrainConfig(epochs=args.epochs, seed=args.seed))
    target = frames[3]
    lines = ["link_loss,mean_predicted_skr,mean_measured_skr"]
    for loss in (float(x) for x in args.losses.split(",")):
        pred = mlp.predict_frame(model, target.with_column("link_loss", loss))
        dp.write_series_csv(pred, out / f"link3_loss{loss:g}.csv")
        lines.append(f"{loss:g},{pred.values.mean()!r},{target['skr'].mean()!r}")
        print(f"link loss {loss:5.1f}: mean predicted {pred.values.mean():8.1f} b/s")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
