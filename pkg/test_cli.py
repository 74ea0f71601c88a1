import io
import json
import os

import pytest
from rich.console import Console

from cli.bench import VARIANTS, apply_overrides, load_sweep, match_objects, run_bench, sweep_points
from cli.main import EXIT_OK, EXIT_PARSE, EXIT_RUNTIME, EXIT_SCHEMA, exit_code_for, main
from cli.repl import QueryRepl
from config import PipelineConfig, RetrievalConfig, RunConfig, TrajectoryConfig, WorldConfig
from errors import GraphInvariantError, MapFormatError, ProviderUnavailable, QueryParseError, SequenceFormatError
from graph.keyframes import KeyframeStore
from graph.persistence import load_map, save_map
from model_client import ProviderSet
from synthetic.truth import simulate
from synthetic.world import generate_world, world_to_graph

DIM = 64
DIM_FLAG = ["--set", f"pipeline.embedding_dim={DIM}"]
KITCHEN_OFFICE = WorldConfig(rooms_per_floor=2, room_kinds="kitchen,office")
SMALL_TRIP = TrajectoryConfig(spin_steps=4, corner_views=False, image_width=160, image_height=120, fx=80.0, rays=64)


def truth_map(directory):
    """Save the kitchen and office truth graph as a map directory"""
    graph, id_map = world_to_graph(generate_world(KITCHEN_OFFICE), DIM)
    save_map(graph, KeyframeStore(), str(directory))
    return str(directory), id_map


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in [k for k in os.environ if k.startswith("IKB_")]:
        monkeypatch.delenv(name)


class TestExitCodes:
    """Test the mapping from failures to exit codes"""

    @pytest.mark.parametrize("error, code", [
        (QueryParseError("no target", (4, 4)), EXIT_PARSE),
        (SequenceFormatError("frames.jsonl: empty"), EXIT_SCHEMA),
        (MapFormatError("objects.jsonl", 3, "bad record"), EXIT_SCHEMA),
        (ValueError("retrieval.k is not section.key=value"), EXIT_SCHEMA),
        (FileNotFoundError("config file not found"), EXIT_SCHEMA),
        (GraphInvariantError("edge-endpoints-exist", "missing object"), EXIT_RUNTIME),
        (ProviderUnavailable("verifier", "timeout"), EXIT_RUNTIME),
        (RuntimeError("boom"), EXIT_RUNTIME),
    ])
    def test_exit_code_for(self, error, code):
        """Test each failure class gets its documented code"""
        assert exit_code_for(error) == code

    def test_help(self, capsys):
        """Test --help lists the commands and exits cleanly"""
        with pytest.raises(SystemExit) as info:
            main(["--help"])
        assert info.value.code == 0
        out = capsys.readouterr().out
        for command in ("build", "query", "repl", "export", "bench", "simulate"):
            assert command in out

    def test_missing_command(self):
        """Test a bare invocation is a usage error"""
        with pytest.raises(SystemExit) as info:
            main([])
        assert info.value.code == 2


class TestQueryCommand:
    """Test one-shot queries against a saved map"""

    def setup_method(self):
        """Set up the flags every query shares"""
        self.args = ["--verify", "off", *DIM_FLAG]

    def test_json_answer(self, tmp_path, capsys):
        """Test the audit record names the object in the right room"""
        map_dir, id_map = truth_map(tmp_path / "map")
        code = main(["query", "--map", map_dir, "find a book in the kitchen", "--json", *self.args])
        assert code == EXIT_OK
        captured = capsys.readouterr()
        record = json.loads(captured.out)
        assert record["answer"]["object_id"] == id_map[10]
        assert record["parser"] == "rules"
        assert captured.err.startswith("# precedence: defaults < config file (none)")

    def test_table_answer(self, tmp_path, capsys):
        """Test the default output is a candidate table"""
        map_dir, _ = truth_map(tmp_path / "map")
        assert main(["query", "--map", map_dir, "find a chair in the office", "--k", "3", *self.args]) == EXIT_OK
        assert "3 candidates" in capsys.readouterr().out

    def test_parse_error(self, tmp_path, capsys):
        """Test a query without a target exits with the parse code and its span"""
        map_dir, _ = truth_map(tmp_path / "map")
        assert main(["query", "--map", map_dir, "find", *self.args]) == EXIT_PARSE
        assert "parse error at [4, 4)" in capsys.readouterr().err

    def test_negated_floor(self, tmp_path, capsys):
        """Test a negated floor clause exits with the parse code"""
        map_dir, _ = truth_map(tmp_path / "map")
        assert main(["query", "--map", map_dir, "find a cup not on floor 1", *self.args]) == EXIT_PARSE
        assert "negated floor clause" in capsys.readouterr().err

    def test_missing_map(self, tmp_path, capsys):
        """Test a missing map directory is a schema error"""
        assert main(["query", "--map", str(tmp_path / "none"), "find a cup", *self.args]) == EXIT_SCHEMA
        assert "schema error" in capsys.readouterr().err

    def test_bad_override(self, tmp_path):
        """Test invalid flags are schema errors before anything is loaded"""
        map_dir, _ = truth_map(tmp_path / "map")
        assert main(["query", "--map", map_dir, "find a cup", "--set", "retrieval.k=0"]) == EXIT_SCHEMA
        assert main(["query", "--map", map_dir, "find a cup", "--set", "retrieval.k"]) == EXIT_SCHEMA


class TestExportCommand:
    """Test map export"""

    def test_json_file(self, tmp_path):
        """Test the JSON export carries the manifest and every object"""
        map_dir, id_map = truth_map(tmp_path / "map")
        out = tmp_path / "map.json"
        assert main(["export", "--map", map_dir, "--out", str(out)]) == EXIT_OK
        document = json.loads(out.read_text())
        assert document["manifest"]["embedding_dim"] == DIM
        assert len(document["objects"]) == len(id_map)

    def test_dot_stdout(self, tmp_path, capsys):
        """Test the DOT export goes to stdout"""
        map_dir, _ = truth_map(tmp_path / "map")
        assert main(["export", "--map", map_dir, "--format", "dot"]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.startswith("digraph scene {")
        assert "rank=same" in out


class TestBuildAndSimulate:
    """Test the commands that write sequences and maps"""

    def test_empty_sequence(self, tmp_path, capsys):
        """Test a directory without a sequence is a schema error"""
        (tmp_path / "seq").mkdir()
        code = main(["build", "--input", str(tmp_path / "seq"), "--out", str(tmp_path / "map")])
        assert code == EXIT_SCHEMA
        assert "schema error" in capsys.readouterr().err

    def test_simulate(self, tmp_path, capsys):
        """Test simulate writes a sequence with its world and truth"""
        out = tmp_path / "sim"
        code = main([
            "simulate", "--out", str(out), "--seed", "3",
            "--set", "world.rooms_per_floor=2",
            "--set", "trajectory.spin_steps=4",
            "--set", "trajectory.corner_views=false",
            "--set", "trajectory.write_images=false",
            "--set", "pipeline.embedding_dim=32",
        ])
        assert code == EXIT_OK
        assert capsys.readouterr().out.startswith(f"simulated {out}: 2 rooms")
        for name in ("meta.json", "frames.jsonl", "detections.jsonl", "world.json", "truth.json"):
            assert (out / name).is_file()
        assert json.loads((out / "world.json").read_text())["seed"] == 3

    def test_build(self, tmp_path, capsys):
        """Test build writes a complete map and no resume marker"""
        simulate(KITCHEN_OFFICE, SMALL_TRIP, str(tmp_path / "seq"), 32)
        out = tmp_path / "map"
        code = main([
            "build", "--input", str(tmp_path / "seq"), "--out", str(out),
            "--set", "pipeline.embedding_dim=32", "--set", "pipeline.threaded=false",
        ])
        assert code == EXIT_OK
        assert capsys.readouterr().out.startswith(f"built {out}")
        assert (out / "manifest.json").is_file()
        assert not (out / "RESUME").exists()
        assert (out / "artifacts" / "updates.jsonl").is_file()
        graph, _ = load_map(str(out))
        assert graph.snapshot().counts()["objects"] > 0

    def test_build_is_reproducible(self, tmp_path):
        """Test two builds of one sequence with one config write identical record files"""
        simulate(KITCHEN_OFFICE, SMALL_TRIP, str(tmp_path / "seq"), 32)
        for name in ("a", "b"):
            code = main([
                "build", "--input", str(tmp_path / "seq"), "--out", str(tmp_path / name),
                "--set", "pipeline.embedding_dim=32", "--set", "pipeline.threaded=false",
            ])
            assert code == EXIT_OK
        first, second = tmp_path / "a", tmp_path / "b"

        def records(root):
            return sorted(str(p.relative_to(root)) for p in [*root.glob("*.jsonl"), *root.glob("masks/*.rle")])

        names = records(first)
        assert "objects.jsonl" in names
        assert names == records(second)
        for name in names:
            assert (first / name).read_bytes() == (second / name).read_bytes(), name


class TestRepl:
    """Test the interactive loop"""

    def setup_method(self):
        """Set up a recording console"""
        self.console = Console(record=True, width=200)

    def run_lines(self, map_dir, lines):
        graph, store = load_map(map_dir)
        feed = iter(lines)
        repl = QueryRepl(
            graph, store, ProviderSet.stub(DIM), RetrievalConfig(verify=False), self.console,
            input_fn=lambda prompt: next(feed),
        )
        repl.run()
        return repl, graph

    def test_session(self, tmp_path):
        """Test queries, fusion, bad commands and parse errors in one session"""
        map_dir, id_map = truth_map(tmp_path / "map")
        book = id_map[10]
        repl, graph = self.run_lines(map_dir, [
            "find a book in the kitchen",
            "",
            f":fuse {book} left my glasses here",
            ":fuse abc",
            ":fuse 999 nothing",
            ":bogus",
            "find",
            ":quit",
            "never read",
        ])
        text = self.console.export_text()
        assert "5 candidates" in text
        assert f"object {book}:" in text
        assert "usage: :fuse <object id> <text>" in text
        assert "unknown id: 999" in text
        assert "Unknown command: :bogus" in text
        assert "parse error at" in text
        assert repl.fused == 1
        assert graph.snapshot().objects[book].description.endswith("left my glasses here")

    def test_end_of_input(self, tmp_path):
        """Test end of input closes the loop"""
        map_dir, _ = truth_map(tmp_path / "map")

        def closed(prompt):
            raise EOFError

        graph, store = load_map(map_dir)
        repl = QueryRepl(graph, store, ProviderSet.stub(DIM), RetrievalConfig(verify=False), self.console, input_fn=closed)
        repl.run()
        assert repl.fused == 0

    def test_persist(self, tmp_path, monkeypatch):
        """Test --persist saves fused descriptions back to the map"""
        map_dir, id_map = truth_map(tmp_path / "map")
        book = id_map[10]
        monkeypatch.setattr("sys.stdin", io.StringIO(f":fuse {book} left my glasses here\n:quit\n"))
        assert main(["repl", "--map", map_dir, "--verify", "off", "--persist", *DIM_FLAG]) == EXIT_OK
        graph, _ = load_map(map_dir)
        assert graph.snapshot().objects[book].description.endswith("left my glasses here")


class TestBench:
    """Test the benchmark harness"""

    def test_sweep_file(self, tmp_path):
        """Test sweep files expand to a sorted cartesian product"""
        path = tmp_path / "sweep.conf"
        path.write_text("retrieval.k = 3,5\nsupervisor.mode = rules\n")
        sweep = load_sweep(str(path))
        assert sweep == {"retrieval.k": ["3", "5"], "supervisor.mode": ["rules"]}
        assert sweep_points(sweep) == [
            {"retrieval.k": "3", "supervisor.mode": "rules"},
            {"retrieval.k": "5", "supervisor.mode": "rules"},
        ]
        assert sweep_points({}) == [{}]

    def test_apply_overrides(self):
        """Test a sweep point overrides the base configuration"""
        config = apply_overrides(RunConfig(), {"retrieval.k": "3"})
        assert config.retrieval.k == 3
        assert apply_overrides(RunConfig(), {}) == RunConfig()

    def test_match_truth_graph(self):
        """Test the truth graph matches every truth object to its own node"""
        world = generate_world(KITCHEN_OFFICE)
        graph, id_map = world_to_graph(world, DIM)
        assert match_objects(world, graph.snapshot()) == id_map

    def test_run_bench(self, tmp_path):
        """Test one seed produces every variant, a storage row and the report file"""
        config = RunConfig(
            pipeline=PipelineConfig(threaded=False, embedding_dim=32),
            world=KITCHEN_OFFICE,
            trajectory=SMALL_TRIP,
        )
        report = run_bench(config, 1, tmp_path / "bench")
        assert len(report.runs) == 1
        run = report.runs[0]
        assert run.label == "default"
        assert [s.variant for s in run.scores] == list(VARIANTS)
        by_variant = {s.variant: s for s in run.scores}
        assert by_variant["with-areas"].queries == by_variant["no-areas"].queries == 4
        assert by_variant["full"].floor_violations == 0
        storage = run.storage[0]
        assert storage.objects > 0
        assert storage.dense_records == 0
        saved = json.loads((tmp_path / "bench" / "bench_report.json").read_text())
        assert saved["seeds"] == 1

    def test_no_seeds(self, tmp_path):
        """Test zero seeds is refused"""
        with pytest.raises(ValueError, match="at least one seed"):
            run_bench(RunConfig(), 0, tmp_path)
