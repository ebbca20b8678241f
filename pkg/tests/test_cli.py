import json
import os
import subprocess
import sys
import urllib.request

import pytest
import yaml

from arenasim.cli import EXIT_CONFIG, EXIT_INTEGRITY, EXIT_MAP, format_table, main
from arenasim.orchestrator import EXIT_CODES, EpisodeLog, SimulationConfig
from oracles import osm_text


@pytest.fixture
def short_config(tmp_path):
    doc = SimulationConfig().to_dict()
    doc.update(map="singapore-hollandvillage", route="sing_route_2", time_limit=2.0)
    p = tmp_path / "short.yaml"
    p.write_text(yaml.safe_dump(doc))
    return str(p)


# ---------------------------------------------------------------------------
# init / validate-map


def test_init_writes_loadable_defaults(tmp_path, capsys):
    out = tmp_path / "cfg.yaml"
    assert main(["init", "--out", str(out)]) == 0
    assert SimulationConfig.from_dict(yaml.safe_load(out.read_text())) == SimulationConfig()
    assert main(["init"]) == 0
    assert "time_limit: 120.0" in capsys.readouterr().out


def test_validate_fixture_map(capsys):
    assert main(["validate-map", "singapore-onenorth", "--json"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["valid"] and stats["lanes"] > 0 and "sing_route_1" in stats["routes"]
    assert main(["validate-map", "boston-seaport"]) == 0
    assert "lanes" in capsys.readouterr().out


def test_validate_dangling_reference(tmp_path, capsys):
    p = tmp_path / "bad.osm"
    p.write_text(osm_text({1: (0.0, 0.0), 2: (0.0, 100.0)}, [(10, [1, 2, 99], {"highway": "residential"})]))
    assert main(["validate-map", str(p)]) == EXIT_MAP
    assert "99" in capsys.readouterr().err


def test_validate_empty_file(tmp_path, capsys):
    p = tmp_path / "empty.osm"
    p.write_text("")
    assert main(["validate-map", str(p)]) == EXIT_MAP
    assert "empty map" in capsys.readouterr().err


def test_validate_malformed_xml_names_line(tmp_path, capsys):
    p = tmp_path / "broken.osm"
    p.write_text('<osm>\n<node id="1" lat="0" lon="0">\n</osm>\n')
    assert main(["validate-map", str(p)]) == EXIT_MAP
    assert "line" in capsys.readouterr().err


def test_validate_missing_file(capsys):
    assert main(["validate-map", "/nonexistent/map.osm"]) == EXIT_MAP


# ---------------------------------------------------------------------------
# run


def test_run_writes_artifacts(tmp_path, short_config, capsys):
    out = tmp_path / "runs"
    code = main(["run", "--config", short_config, "--seed", "7", "--out", str(out)])
    assert code == EXIT_CODES["TIME_LIMIT"]
    text = capsys.readouterr().out
    assert "PDMS" in text and "sing_route_2" in text
    log = EpisodeLog.read(str(out / "sing_route_2.log.ndjson"))
    assert log.header["seed"] == 7 and log.header["config"]["traffic"] == SimulationConfig().to_dict()["traffic"]
    report = json.loads((out / "sing_route_2.report.json").read_text())
    assert report["termination"] == "TIME_LIMIT"
    rows = (out / "sing_route_2.frames.csv").read_text().splitlines()
    assert rows[0] == "t,nc,dac,ep,ttc,comfort,pdms_t" and len(rows) == 1 + 4


def test_run_is_idempotent(tmp_path, short_config):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["run", "--config", short_config, "--out", str(a)])
    main(["run", "--config", short_config, "--out", str(b)])
    for name in ("sing_route_2.log.ndjson", "sing_route_2.report.json", "report.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_suite_prints_average_row(tmp_path, short_config, capsys):
    out = tmp_path / "suite"
    main(["run", "--config", short_config, "--routes", "sing_route_2,boston_route_2", "--out", str(out)])
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split()[:4] == ["Route", "PDMS", "RC", "ADS"]
    assert [ln.split()[0] for ln in lines[1:]] == ["sing_route_2", "boston_route_2", "Average"]
    summary = json.loads((out / "report.json").read_text())
    assert [r["route"] for r in summary["routes"]] == ["sing_route_2", "boston_route_2"]
    pdms = [r["pdms"] for r in summary["routes"]]
    assert summary["average"]["pdms"] == pytest.approx(sum(pdms) / 2)


def test_run_rejects_bad_input(tmp_path, short_config, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("time_limit: -5\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "time_limit" in capsys.readouterr().err
    assert main(["run", "--config", short_config, "--routes", "a,a", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["run", "--config", short_config, "--routes", "mars_route_1", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["run", "--config", short_config, "--agent", "teleport", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_format_table_shape():
    rows = [
        {"route": "a", "pdms": 0.8, "route_completion": 1.0, "ads": 0.8, "termination": "ROUTE_COMPLETE"},
        {"route": "b", "pdms": 0.6, "route_completion": 0.5, "ads": 0.3, "termination": "COLLISION"},
    ]
    lines = format_table(rows).splitlines()
    assert len(lines) == 4 and lines[-1].split() == ["Average", "0.7000", "0.7500", "0.5500"]
    assert len(format_table(rows, average=False).splitlines()) == 3


# ---------------------------------------------------------------------------
# replay


@pytest.fixture
def logged(tmp_path, short_config):
    out = tmp_path / "run"
    main(["run", "--config", short_config, "--out", str(out)])
    return out / "sing_route_2.log.ndjson"


def test_replay_untouched_log(logged, tmp_path, capsys):
    assert main(["replay", str(logged), "--out", str(tmp_path / "rp")]) == 0
    assert "reproduced: yes" in capsys.readouterr().out
    doc = json.loads((tmp_path / "rp" / "sing_route_2.replay.json").read_text())
    original = json.loads((logged.parent / "sing_route_2.report.json").read_text())
    assert doc["matches"] and not doc["rescored"]
    assert doc["pdms"] == original["pdms"] and doc["frame_scores"] == original["frame_scores"]


def test_replay_flipped_byte(logged, capsys):
    lines = logged.read_bytes().split(b"\n")
    first_frame = bytearray(lines[1])
    pos = first_frame.index(b'"pose":[') + 8
    while not chr(first_frame[pos]).isdigit():
        pos += 1
    first_frame[pos] = ord("7") if first_frame[pos] != ord("7") else ord("6")
    lines[1] = bytes(first_frame)
    logged.write_bytes(b"\n".join(lines))
    assert main(["replay", str(logged)]) == EXIT_INTEGRITY
    assert "record 1" in capsys.readouterr().err


def test_replay_with_new_weights(logged, capsys):
    assert main(["replay", str(logged), "--weights", "1,0,0"]) == 0
    assert "re-scored" in capsys.readouterr().out
    assert main(["replay", str(logged), "--weights", "1,2"]) == EXIT_CONFIG
    assert main(["replay", str(logged), "--weights", "0,0,0"]) == EXIT_CONFIG


def test_replay_missing_log(tmp_path):
    assert main(["replay", str(tmp_path / "none.ndjson")]) == EXIT_CONFIG


# ---------------------------------------------------------------------------
# serve / entry point


def test_serve_subprocess_answers_healthz():
    proc = subprocess.Popen(
        [sys.executable, "-m", "arenasim.cli", "serve", "--port", "0"],
        stdout=subprocess.PIPE,
        text=True,
        env={**os.environ, "PYTHONUNBUFFERED": "1"},
    )
    try:
        line = proc.stdout.readline()
        assert line.startswith("serving on http://")
        url = line.split()[-1]
        with urllib.request.urlopen(url + "/healthz", timeout=10) as r:
            assert json.loads(r.read())["status"] == "ok"
    finally:
        proc.terminate()
        proc.wait(10)


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2
