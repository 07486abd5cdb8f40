"""One model trained on links 1, 2 and 4, evaluated on all five links."""
import argparse

from _common import evaluate, link_frame, out_dir
from cowqkd import metrics, mlp


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--out", default="results/three_link")
    args = ap.parse_args()
    frames = {i: link_frame(i)[0] for i in range(1, 6)}
    model = mlp.train(mlp.init(mlp.MlpTopology(), args.seed), [frames[i] for i in (1, 2, 4)],
                      mlp.TrainConfig(epochs=args.epochs, seed=args.seed))
    rows = []
    for i, frame in frames.items():
        role = "train" if i in (1, 2, 4) else "test"
        report = evaluate(model, frame)
        rows.append((f"link{i}", f"links124_{role}", report))
        print(f"link {i} ({role}): MSE {report.mse:.6f}  ME {report.me:7.1f}  MAE {report.mae:7.1f}  MRE {report.mre}")
    metrics.write_reports(rows, out_dir(args.out) / "three_link.csv")


if __name__ == "__main__":
    main()
