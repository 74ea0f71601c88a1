import pytest
from pydantic import ValidationError

from config import RunConfig, deep_merge, environment_layer, flatten, load_run_config, nest, parse_overrides
from model_client import ProviderMode


class TestLayering:
    """Test defaults < file < flags < environment"""

    def test_defaults(self):
        """Test an empty resolution gives the model defaults"""
        config = load_run_config(environ={})
        assert config.grid.resolution_m == 0.05
        assert config.retrieval.k == 5
        assert config.world.door_max_m == 1.0
        assert config.grid.door_half_width_m == 0.6
        assert config.source_file is None

    def test_file_then_flags(self, tmp_path):
        """Test flags override the config file"""
        path = tmp_path / "run.conf"
        path.write_text("grid.resolution_m = 0.1\nretrieval.k = 3\nassociation.known_categories = bed, lamp\n")
        config = load_run_config(str(path), ["retrieval.k=7"], environ={})
        assert config.grid.resolution_m == 0.1
        assert config.retrieval.k == 7
        assert config.association.known_categories == ("bed", "lamp")
        assert config.source_file == str(path)

    def test_config_from_environment_variable(self, tmp_path):
        """Test IKB_CONFIG names the default file"""
        path = tmp_path / "run.conf"
        path.write_text("pipeline.check_every = 9\n")
        config = load_run_config(environ={"IKB_CONFIG": str(path)})
        assert config.pipeline.check_every == 9

    def test_environment_wins(self):
        """Test provider environment variables beat flags"""
        environ = {
            "IKB_VERIFIER_MODE": "http",
            "IKB_VERIFIER_ENDPOINT": "http://vlm.test/v1",
            "IKB_VERIFIER_MODEL": "vision",
        }
        config = load_run_config(overrides=["providers.verifier.model=other"], environ=environ)
        assert config.providers.verifier.mode == ProviderMode.HTTP
        assert config.providers.verifier.model == "vision"
        assert config.providers.parser.mode == ProviderMode.STUB

    def test_missing_file(self):
        """Test a missing config file is reported"""
        with pytest.raises(FileNotFoundError, match="config file not found"):
            load_run_config("/nonexistent/run.conf", environ={})

    def test_invalid_value(self):
        """Test values are validated by the section models"""
        with pytest.raises(ValidationError):
            load_run_config(overrides=["retrieval.k=0"], environ={})

    def test_cross_field_check(self):
        """Test the open-vocabulary threshold cannot undercut the strict one"""
        with pytest.raises(ValidationError, match="tau_vis_open"):
            load_run_config(overrides=["association.tau_vis_open=0.5"], environ={})


class TestHelpers:
    """Test dotted-key helpers"""

    def test_nest_and_merge(self):
        """Test dotted keys nest and layers merge deeply"""
        base = nest({"grid.resolution_m": "0.1", "grid.tau_sim": "0.9"})
        merged = deep_merge(base, nest({"grid.tau_sim": "0.8"}))
        assert merged == {"grid": {"resolution_m": "0.1", "tau_sim": "0.8"}}

    def test_key_needs_section(self):
        """Test bare keys are refused"""
        with pytest.raises(ValueError, match="needs a section prefix"):
            nest({"resolution_m": "0.1"})

    def test_bad_override(self):
        """Test overrides must be key=value"""
        with pytest.raises(ValueError, match="is not section.key=value"):
            parse_overrides(["retrieval.k"])

    def test_token_variable_recorded(self):
        """Test a token in the environment is referenced by name, never copied"""
        layer = environment_layer({"IKB_PARSER_TOKEN": "secret"})
        assert layer == {"providers.parser.token_env": "IKB_PARSER_TOKEN"}

    def test_room_hints_string(self):
        """Test label:room pairs parse from a flat value"""
        config = load_run_config(overrides=["supervisor.room_hints=bed:bedroom, sink:kitchen"], environ={})
        assert config.supervisor.room_hints == {"bed": "bedroom", "sink": "kitchen"}


class TestHeader:
    """Test the reproducibility header"""

    def test_header_lists_every_key(self):
        """Test the header starts with the precedence and lists resolved keys"""
        lines = RunConfig().header_lines()
        assert lines[0].startswith("# precedence: defaults < config file (none)")
        assert "grid.resolution_m = 0.05" in lines
        assert "retrieval.verify = True" in lines
        assert not any("secret" in line for line in lines)

    def test_flatten_lists(self):
        """Test tuples and mappings flatten to comma lists"""
        flat = flatten({"world": {"room_kinds": ["bedroom", "office"]}, "supervisor": {"room_hints": {"b": "x", "a": "y"}}})
        assert flat == {"world.room_kinds": "bedroom,office", "supervisor.room_hints": "a:y,b:x"}
