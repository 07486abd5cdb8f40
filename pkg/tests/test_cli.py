from pathlib import Path

import numpy as np
import pytest

from cowqkd import data_pipeline as dp, mlp
from cowqkd.cli import build_parser, main, reference_markdown

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Two days of synthetic data for all five links, prepped and one model trained."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d / "data"), "--duration", "2d"]) == 0
    for i in range(1, 6):
        assert main(["prep", "--in", str(d / "data" / f"link{i}"), "--out", str(d / f"link{i}.csv")]) == 0
    args = ["train", "--model", str(d / "m.bin"), "--epochs", "3"]
    for i in (1, 2, 4):
        args += ["--frame", str(d / f"link{i}.csv")]
    assert main(args) == 0
    return d


def test_synth_default_layout(workdir, capsys):
    for i in range(1, 6):
        assert len(list((workdir / "data" / f"link{i}").glob("*.csv"))) == 4


def test_synth_prints_counts(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--duration", "1h"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "link,skr,qber,visibility,laserpower"
    assert out[1] == "1,60,60,60,60"
    assert len(out) == 6


def test_synth_missing_scenario_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--scenario", str(tmp_path / "nope.ini"), "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_synth_seed_override(tmp_path):
    main(["synth", "--out", str(tmp_path / "a"), "--duration", "1h", "--seed", "3"])
    main(["synth", "--out", str(tmp_path / "b"), "--duration", "1h", "--seed", "3"])
    main(["synth", "--out", str(tmp_path / "c"), "--duration", "1h", "--seed", "4"])
    a, b, c = ((tmp_path / x / "link1" / "skr.csv").read_bytes() for x in "abc")
    assert a == b != c


def test_synth_from_scenario_file(tmp_path):
    cfg = tmp_path / "s.ini"
    cfg.write_text("[scenario]\nduration = 2h\n[link9]\ndistance_km = 30\n")
    assert main(["synth", "--scenario", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "link9" / "skr.csv").exists()


def test_prep_skr_excerpt(tmp_path):
    out = tmp_path / "a2.csv"
    assert main(["prep", "--in", str(FIXTURES / "skr_excerpt.csv"), "--lags", "", "--out", str(out)]) == 0
    frame = dp.read_frame_csv(out)
    assert frame["skr"][0] == pytest.approx(23204 / 19, rel=1e-12)


def test_prep_link_loss_from_meta(workdir):
    frame = dp.read_frame_csv(workdir / "link2.csv")
    assert np.all(frame["link_loss"] == 57.0)
    assert frame.names[-3:] == ["skr_lag1", "skr_lag2", "skr_lag3"]


def test_prep_corrupt_line(tmp_path, capsys):
    bad = tmp_path / "skr.csv"
    bad.write_text("2023-11-29 18:50:00+00:00,1\n2023-11-29 18:51:00+00:00,oops\n")
    assert main(["prep", "--in", str(bad), "--lags", "", "--out", str(tmp_path / "f.csv")]) == 1
    err = capsys.readouterr().err
    assert "skr.csv:2:" in err and "oops" in err


def test_prep_lag_on_one_row(tmp_path, capsys):
    one = tmp_path / "skr.csv"
    one.write_text("2023-11-29 18:50:00+00:00,1\n")
    assert main(["prep", "--in", str(one), "--lags", "1", "--out", str(tmp_path / "f.csv")]) == 1
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "f.csv").exists()


@pytest.mark.parametrize("free", ["alpha", "alpha,eta", "alpha,eta,t_B"])
def test_fit_variants(workdir, tmp_path, free):
    out, res = tmp_path / "fit.txt", tmp_path / "res.csv"
    code = main(["fit", "--frame", str(workdir / "link1.csv"), "--params", str(workdir / "data" / "link1" / "link.ini"),
                 "--free", free, "--out", str(out), "--residuals", str(res)])
    assert code == 0
    kv = dict(line.split(" = ") for line in out.read_text().splitlines())
    assert set(free.split(",")) == {k[len("fitted."):] for k in kv if k.startswith("fitted.")}
    assert float(kv["residual_rms"]) <= float(kv["initial_rms"])
    assert res.read_text().startswith("timestamp,measured,calculated,residual\n")


def test_fit_needs_base_params(workdir, tmp_path, capsys):
    assert main(["fit", "--frame", str(workdir / "link1.csv"), "--out", str(tmp_path / "f.txt")]) == 1
    assert "--params" in capsys.readouterr().err


def test_evaluate_five_links(workdir, tmp_path):
    args = ["evaluate", "--model", str(workdir / "m.bin"), "--out", str(tmp_path / "ev.csv")]
    for i in range(1, 6):
        args += ["--frame", str(workdir / f"link{i}.csv")]
    assert main(args) == 0
    lines = (tmp_path / "ev.csv").read_text().splitlines()
    assert lines[0] == "link,model,n,me,mae,mre,mse"
    assert [l.split(",")[0] for l in lines[1:]] == [f"link{i}" for i in range(1, 6)]


def test_evaluate_perfect_predictions(workdir, tmp_path):
    p = tmp_path / "perfect.csv"
    p.write_text("timestamp,measured,predicted\n2023-11-29T00:00:00Z,1500.0,1500.0\n2023-11-29T00:10:00Z,1400.0,1400.0\n")
    assert main(["evaluate", "--model", str(workdir / "m.bin"), "--predictions", str(p), "--out", str(tmp_path / "e.csv")]) == 0
    row = (tmp_path / "e.csv").read_text().splitlines()[1]
    assert row == "perfect,m,2,0.0,0.0,0.0,0.0"


def test_predict_link_loss_sweep(workdir, tmp_path):
    out = tmp_path / "pred.csv"
    args = ["predict", "--model", str(workdir / "m.bin"), "--frame", str(workdir / "link3.csv"), "--out", str(out),
            "--link-loss", "40", "--link-loss", "60"]
    assert main(args) == 0
    a, b = tmp_path / "pred_loss40.csv", tmp_path / "pred_loss60.csv"
    assert a.exists() and b.exists()
    assert a.read_text().splitlines()[0] == "timestamp,measured,predicted"
    assert a.read_text() != b.read_text()


def test_predict_matches_library(workdir, tmp_path):
    out = tmp_path / "p.csv"
    main(["predict", "--model", str(workdir / "m.bin"), "--frame", str(workdir / "link5.csv"), "--out", str(out)])
    pred = np.genfromtxt(out, delimiter=",", names=True, dtype=None, encoding="utf-8")["predicted"]
    model = mlp.load(workdir / "m.bin")
    assert np.array_equal(pred, mlp.predict_frame(model, dp.read_frame_csv(workdir / "link5.csv")).values)


def test_train_missing_column(workdir, tmp_path, capsys):
    f = dp.read_frame_csv(workdir / "link1.csv").drop(["link_loss"])
    dp.write_frame_csv(f, tmp_path / "f.csv")
    assert main(["train", "--frame", str(tmp_path / "f.csv"), "--model", str(tmp_path / "m.bin"), "--epochs", "1"]) == 1
    assert "link_loss" in capsys.readouterr().err


def test_missing_model_file(workdir, tmp_path):
    assert main(["predict", "--model", str(tmp_path / "none.bin"), "--frame", str(workdir / "link1.csv"),
                 "--out", str(tmp_path / "p.csv")]) == 1


def test_correlate(workdir, tmp_path):
    out = tmp_path / "c.csv"
    with pytest.warns(UserWarning, match="constant"):
        assert main(["correlate", "--frame", str(workdir / "link1.csv"), "--out", str(out)]) == 0
    rows = [line.split(",") for line in out.read_text().splitlines()]
    labels = rows[0][1:]
    skr = next(r for r in rows[1:] if r[0] == "skr")
    assert float(skr[1 + labels.index("visibility")]) > 0.5


def test_correlate_duplicate_column(tmp_path, capsys):
    ts = np.datetime64("2023-11-29T00:00", "us") + np.arange(5) * np.timedelta64(10, "m")
    x = np.array([1.0, 3.0, 2.0, 5.0, 4.0])
    dp.write_frame_csv(dp.FeatureFrame(ts, {"a": x, "b": x.copy()}), tmp_path / "f.csv")
    assert main(["correlate", "--frame", str(tmp_path / "f.csv")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[1].split(",")[2] == "1.000000"


def test_correlate_one_row(tmp_path):
    ts = np.array([np.datetime64("2023-11-29T00:00", "us")])
    dp.write_frame_csv(dp.FeatureFrame(ts, {"a": np.array([1.0]), "b": np.array([2.0])}), tmp_path / "f.csv")
    assert main(["correlate", "--frame", str(tmp_path / "f.csv")]) == 1


def test_reference_page_is_current():
    text = reference_markdown()
    for cmd in ("synth", "prep", "fit", "train", "predict", "evaluate", "correlate"):
        assert f"## {cmd}" in text
    doc = Path(__file__).parent.parent / "docs" / "CLI.md"
    assert doc.read_text() == text


def test_no_command_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([])
    assert exc.value.code == 2
