import copy

import pytest
import yaml

from collabchain.config import ConfigError, Runtime, load_config
from collabchain.embedder import HashingEncoder
from collabchain.gateway import HttpBackend, ScriptedBackend
from collabchain.report import append_usage, cost_table, format_table, load_usage, render_cost_figure
from collabchain.gateway import UsageRecord

import world


def write(tmp_path, cfg):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    (tmp_path / "script.jsonl").write_text("")
    return path


def test_world_config_loads(tmp_path):
    cfg = load_config(write(tmp_path, world.config_dict()))
    assert [s.id for s in cfg.stages] == world.STAGE_IDS
    assert cfg.m == 2 and cfg.budget == 1024 and cfg.delta == 0.35
    assert cfg.path("tree") == tmp_path / "artifacts" / "tree.jsonl"
    assert cfg.rates["backbone-1"] == (1e-6, 4e-6)
    rt = Runtime(cfg)
    assert isinstance(rt.backend("fixture"), ScriptedBackend)
    assert set(rt.agents()) == set(world.STAGE_IDS)
    assert isinstance(rt.encoder(), HashingEncoder)
    assert rt.role("generator", required=False) is None


@pytest.mark.parametrize("mutate, message", [
    (lambda c: c.update(stages=[]), "stages"),
    (lambda c: c["roles"]["agents"].pop("supply"), "supply"),
    (lambda c: c["backends"]["fixture"].update(api_key="abc"), "COCHAIN_API_KEY"),
    (lambda c: c["backends"]["fixture"].update(kind="grpc"), "kind"),
    (lambda c: c["retrieval"].update(delta=1.5), "delta"),
    (lambda c: c["tree"].update(m=0), "tree.m"),
    (lambda c: c["retrieval"].update(max_depth=1), "max_depth"),
    (lambda c: c["roles"]["backbone"].update(backend="missing"), "missing"),
    (lambda c: c["retrieval"].update(keyword_mode="llm"), "keywords"),
])
def test_invalid_configs(tmp_path, mutate, message):
    cfg = copy.deepcopy(world.config_dict())
    mutate(cfg)
    with pytest.raises(ConfigError, match=message):
        load_config(write(tmp_path, cfg))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_http_backend_from_config(tmp_path):
    cfg = copy.deepcopy(world.config_dict())
    cfg["backends"]["remote"] = {"kind": "http", "base_url": "http://localhost:9/v1", "retry_limit": 1}
    rt = Runtime(load_config(write(tmp_path, cfg)))
    backend = rt.backend("remote")
    assert isinstance(backend, HttpBackend) and backend.retry_limit == 1


def test_skip_stage_validation(tmp_path):
    cfg = load_config(write(tmp_path, world.config_dict()))
    assert cfg.query_config(["supply"]).skip_stages == ("supply",)
    with pytest.raises(ConfigError):
        cfg.query_config(["paint"])


def test_cost_table(tmp_path):
    log = tmp_path / "usage.jsonl"
    append_usage(log, "query", UsageRecord(1, 500, 40, 0.00066, 1000))
    append_usage(log, "query", UsageRecord(1, 300, 60, 0.00054, 3000))
    append_usage(log, "build-kg", UsageRecord(10, 1000, 2000, 0.009, 0))
    rows = cost_table(load_usage(log))
    assert [r["kind"] for r in rows] == ["query", "build-kg"]
    q = rows[0]
    assert (q["runs"], q["calls"], q["avg_input"], q["avg_output"]) == (2, 2, 400.0, 50.0)
    assert q["avg_cost"] == pytest.approx(0.0006)
    assert q["avg_wall_s"] == pytest.approx(2.0)
    text = format_table(rows)
    assert text.splitlines()[1] == "query\t2\t2\t400.00\t50.00\t0.000600\t2.00"
    out = render_cost_figure(rows, tmp_path / "cost.png")
    assert out.read_bytes()[:4] == b"\x89PNG"
