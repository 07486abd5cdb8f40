"""Interpolation versus extrapolation in link loss.

Three links differ only in length (20, 46, 57 km, used as the link-loss
feature). One model trains on the outer links and predicts the middle one,
another trains on the two longer links and predicts the shortest.
"""
import argparse

from _common import evaluate, link_frame, out_dir
from cowqkd import metrics, mlp


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--out", default="results/interp_extrap")
    args = ap.parse_args()
    frames = {loss: link_frame(i, distance_km=loss)[0] for i, loss in ((1, 20.0), (2, 46.0), (3, 57.0))}
    cfg = mlp.TrainConfig(epochs=args.epochs, seed=args.seed)
    rows = []
    for label, train_on, test_on in (("interpolation", (20.0, 57.0), 46.0), ("extrapolation", (46.0, 57.0), 20.0)):
        model = mlp.train(mlp.init(mlp.MlpTopology(), args.seed), [frames[k] for k in train_on], cfg)
        report = evaluate(model, frames[test_on])
        rows.append((f"loss{test_on:g}", label, report))
        print(f"{label:14s} train {train_on} test {test_on}: MSE {report.mse:.6f}  MAE {report.mae:.1f} b/s")
    metrics.write_reports(rows, out_dir(args.out) / "interp_extrap.csv")


if __name__ == "__main__":
    main()
