from __future__ import annotations

import pytest

from conftest import make_cluster
from tierfs.harness.checks import Entity, check_content, check_migration, check_oracle, check_store
from tierfs.harness.cli import main
from tierfs.harness.runner import run_scenario
from tierfs.harness.scenario import ScenarioError, bundled_scenarios, load_scenario, parse_scenario
from tierfs.harness.workload import apply_to_cluster, apply_to_ref, gen_workload
from tierfs.refmodel import RefFS

SMALL = """\
# tiny
seed = 9
nodes = 2
chunk_size = 1024

[workload]
files = 12
dirs = 3
size_min = 1
size_max = 3
unit = 700

[schedule]
step = join 2
step = leave 1
step = persist_all

[checks]
check = migration
check = content
check = store
"""


def test_parse_small_scenario():
    sc = parse_scenario(SMALL, "small")
    assert (sc.seed, sc.nodes, sc.chunk_size) == (9, 2, 1024)
    assert sc.workload.files == 12 and sc.workload.unit == 700
    assert sc.steps == [("join", ["2"]), ("leave", ["1"]), ("persist_all", [])]
    assert sc.checks == ["migration", "content", "store"]
    again = parse_scenario(sc.to_text(), "small")
    assert again == sc


@pytest.mark.parametrize("text,line,needle", [
    ("seed = x\n", 1, "integer"),
    ("seed = 1\nseed = 2\n", 2, "duplicate"),
    ("\n[bogus]\n", 2, "unknown section"),
    ("[schedule]\nstep = fly 3\n", 2, "unknown step"),
    ("[schedule]\nstep = join\n", 2, "argument"),
    ("[checks]\ncheck = vibes\n", 2, "unknown check"),
    ("# c\nnodes\n", 2, "key = value"),
    ("mode = eventual\n", 1, "strict or weak"),
    ("[workload]\ncolour = red\n", 2, "unknown workload key"),
    ("nodes = -1\n", 1, "negative"),
])
def test_parse_errors_carry_line_numbers(text, line, needle):
    with pytest.raises(ScenarioError) as info:
        parse_scenario(text)
    assert info.value.line == line
    assert needle in str(info.value)


def test_bundled_scenarios_parse():
    names = bundled_scenarios()
    assert {"scale_cycle", "scale_up_dirty", "zero_scale_roundtrip", "fsync_fault_sweep"} <= set(names)
    for name in names:
        assert load_scenario(name).name == name


def test_workload_is_deterministic():
    spec = parse_scenario(SMALL).workload
    a, b = gen_workload(spec, 3), gen_workload(spec, 3)
    assert [o.line() for o in a] == [o.line() for o in b]
    assert [o.line() for o in gen_workload(spec, 4)] != [o.line() for o in a]
    writes = [o for o in a if o.op == "write"]
    assert len(writes) == 12 and all(700 <= len(o.payload) <= 2100 for o in writes)


def test_oracle_flags_a_corrupted_store(tmp_path):
    c = make_cluster(tmp_path / "c")
    ops = gen_workload(parse_scenario(SMALL).workload, 1)
    ref = RefFS()
    apply_to_ref(ref, ops)
    apply_to_cluster(c, ops)
    c.persist_all()
    assert check_oracle(c, ref, c.ext) == []
    victim = sorted(ref.files())[0]
    c.ext.mutate_out_of_band("data", victim[6:], b"garbage")
    assert any("differs" in f for f in check_store(c.ext, ref))
    c.ext.mutate_out_of_band("data", "stray", b"")
    assert any("unexpected object" in f for f in check_store(c.ext, ref))
    ref.write(victim, 0, b"changed")
    assert any(victim in f for f in check_content(c, ref))


def test_migration_check_reports_both_directions():
    expected = {Entity("meta", 5), Entity("chunk", 5, 1024)}
    body = {"bytes": 10, "dirs": [], "metas": [{"inode": 5, "dirty": True, "kind": "file"}],
            "chunks": [{"inode": 6, "offset": 0, "dirty": False}], "pending": []}
    findings = check_migration(expected, 10, [body])
    assert any("did not happen" in f for f in findings)
    assert any("unexpected migration" in f for f in findings)
    assert any("clean chunk" in f for f in findings)


def test_small_scenario_passes(tmp_path):
    report = run_scenario(parse_scenario(SMALL, "small"), workdir=tmp_path)
    assert report.ok, report.findings
    assert report.metrics["nodes.started"] == 4
    assert report.metrics["migration.expected_entities"] > 0
    assert "check.store pass" in report.metrics_text()


def test_cli_run_and_verify_log(tmp_path, capsys):
    scn = tmp_path / "small.scn"
    scn.write_text(SMALL)
    metrics = tmp_path / "m.txt"
    trace = tmp_path / "t.txt"
    work = tmp_path / "work"
    assert main(["run", str(scn), "--metrics", str(metrics), "--trace", str(trace), "--workdir", str(work)]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    assert "ticks.workload" in metrics.read_text()
    assert trace.read_text().startswith("mkdir ")
    node_dir = next(p for p in (work / "gen1").iterdir() if (p / "wal.log").stat().st_size)
    assert main(["verify-log", str(node_dir)]) == 0
    assert capsys.readouterr().out.startswith("ok ")
    wal = node_dir / "wal.log"
    raw = bytearray(wal.read_bytes())
    raw[30] ^= 1
    wal.write_bytes(bytes(raw))
    assert main(["verify-log", str(node_dir)]) == 1
    assert "corrupt entry 1" in capsys.readouterr().out
    assert main(["verify-log", str(tmp_path)]) == 2


def test_cli_rejects_bad_scenario(tmp_path, capsys):
    scn = tmp_path / "bad.scn"
    scn.write_text("seed = 1\n[schedule]\nstep = fly\n")
    assert main(["run", str(scn)]) == 2
    assert "line 3" in capsys.readouterr().err
