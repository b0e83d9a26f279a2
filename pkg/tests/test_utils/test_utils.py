import io
import json
import logging
import sys
from pathlib import Path
import numpy as np
import pytest
from tests.data import benchmark_config
from utils.errors import CheckpointError, DatasetError, InvalidParameterError, SegbenchError, TrainingDivergedError
from utils.logging_utils import JsonLineFormatter, configure_logging, log_event
from utils.rng import RngStream
from utils.validators import BenchmarkConfigValidator, TrainConfigValidator

CONFIGS = Path(__file__).resolve().parents[2] / "configs"


class TestConfigValidators:
    """Test suite for benchmark and train config validation"""

    def test_valid_configs(self):
        assert BenchmarkConfigValidator.validate_config(benchmark_config())[0]
        for path in sorted(CONFIGS.glob("*.json")):
            valid, message = BenchmarkConfigValidator.validate_config(json.loads(path.read_text(encoding="utf-8")))
            assert valid, "{}: {}".format(path.name, message)

    @pytest.mark.parametrize("overrides, fragment", [
        ({"experiments": []}, "experiments"),
        ({"architectures": ["segnet"]}, "Invalid architecture"),
        ({"encoders": ["inception-like"]}, "Invalid encoder"),
        ({"encoders": [{"family": "vgg-like", "width_scale": 0}]}, "width_scale"),
        ({"seed": -1}, "seed"),
        ({"dataset": "data"}, "Exactly one"),
        ({"inits": [{"kind": "random"}, {"kind": "random"}]}, "only once"),
        ({"inits": [{"kind": "warmstart"}]}, "checkpoint or a pretrain"),
        ({"synthetic": {"n_slices": 2}}, ">= 3"),
        ({"train": {"epochs": 0}}, "epochs"),
    ])
    def test_invalid_configs(self, overrides, fragment):
        valid, message = BenchmarkConfigValidator.validate_config(benchmark_config(**overrides))
        assert not valid
        assert fragment in message

    def test_train_settings(self):
        assert TrainConfigValidator.validate_train_config({"lr": 1e-3, "empty_rule": "strict"})[0]
        assert not TrainConfigValidator.validate_train_config({"learning_rate": 1e-3})[0]
        assert not TrainConfigValidator.validate_train_config({"augment": 1})[0]
        assert not TrainConfigValidator.validate_train_config({"beta2": 1.0})[0]
        assert not TrainConfigValidator.validate_train_config({"optimizer": "rmsprop"})[0]
        assert not TrainConfigValidator.validate_train_config([])[0]


class TestRngStream:
    """Test suite for addressed random streams"""

    def test_same_address_same_draws(self):
        a = RngStream(7, [3]).split(2).generator().random(5)
        b = RngStream(7, [3, 2]).generator().random(5)
        np.testing.assert_array_equal(a, b)

    def test_siblings_differ(self):
        root = RngStream(7)
        assert not np.array_equal(root.split(0).generator().random(5), root.split(1).generator().random(5))
        assert root.split(0) != root.split(1)
        assert root.split(4) == RngStream(7, [4])

    def test_invalid_seed_and_index(self):
        with pytest.raises(ValueError):
            RngStream(-1)
        with pytest.raises(ValueError):
            RngStream(2 ** 64)
        with pytest.raises(ValueError):
            RngStream(1).split(-1)


class TestErrorsAndLogging:
    """Test suite for the error hierarchy and JSON-line logging"""

    def test_errors_share_a_root(self):
        assert issubclass(InvalidParameterError, ValueError)
        error = DatasetError("bad magic", "/data/a.segb")
        assert isinstance(error, SegbenchError)
        assert str(error).startswith("/data/a.segb")
        assert CheckpointError("truncated", "m.ckpt").path == "m.ckpt"
        assert str(TrainingDivergedError("non-finite training loss", 3)).startswith("epoch 3")

    def test_json_lines(self):
        stream = io.StringIO()
        root = logging.getLogger()
        handlers, level = list(root.handlers), root.level
        try:
            configure_logging(logging.INFO, stream)
            log_event(logging.getLogger("segbench.test"), "cell_finished", cell="000-x", dice=71.5)
            logging.getLogger("segbench.test").debug("hidden")
        finally:
            root.handlers[:] = handlers
            root.setLevel(level)
        lines = stream.getvalue().splitlines()
        assert len(lines) == 1
        payload = json.loads(lines[0])
        assert payload["event"] == "cell_finished"
        assert payload["level"] == "info"
        assert (payload["cell"], payload["dice"]) == ("000-x", 71.5)

    def test_exception_field(self):
        formatter = JsonLineFormatter()
        try:
            raise RuntimeError("boom")
        except RuntimeError:
            record = logging.LogRecord("x", logging.ERROR, __file__, 1, "failed", None, sys.exc_info())
        assert "RuntimeError: boom" in json.loads(formatter.format(record))["exception"]
