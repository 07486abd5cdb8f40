"""Shared helpers for the experiment scripts."""
from pathlib import Path

from cowqkd import data_pipeline as dp, metrics, mlp
from cowqkd.synth_data import default_link, default_scenario, generate_link


def link_frame(link_id, duration="14d", distance_km=None, lags=(1, 2, 3), seed=None):
    cfg = default_link(link_id, distance_km=distance_km) if distance_km else _scenario_link(link_id)
    if seed is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, noise=dataclasses.replace(cfg.noise, seed=seed))
    frame, _ = dp.prepare(generate_link(cfg, duration=duration), lags=lags, link_loss=cfg.loss)
    return frame, cfg


def _scenario_link(link_id):
    return next(c for c in default_scenario() if c.link_id == link_id)


def evaluate(model, frame):
    X, y = mlp.scaled_arrays(frame, model.topology, model.scaler_state)
    pred = mlp.forward(model, X)
    return metrics.compute(frame[model.topology.target], mlp.inverse_target(model, pred), y, pred)


def out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
