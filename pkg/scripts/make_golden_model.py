"""Regenerate the golden model fixture used by the persistence test."""
from pathlib import Path

from cowqkd import data_pipeline as dp, mlp, synth_data

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

if __name__ == "__main__":
    link = synth_data.default_link(1)
    frame, _ = dp.prepare(synth_data.generate_link(link, duration="2d"), link_loss=link.loss)
    model = mlp.train(mlp.init(mlp.MlpTopology(), 0), frame, mlp.TrainConfig(epochs=5, seed=0))
    mlp.save(model, FIXTURES / "golden_model.bin")
    dp.write_frame_csv(frame.rows(slice(0, 5)), FIXTURES / "golden_frame.csv")
    print(repr(float(mlp.predict_frame(model, frame.rows(slice(0, 1))).values[0])))
