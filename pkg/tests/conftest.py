import pytest

from adasp.bench import make_sequence
from adasp.runtime import ModelConfig, ModelWeights


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(num_layers=4, hidden_dim=16, ffn_dim=32, num_heads=2, vocab_size=32, max_positions=128)


@pytest.fixture(scope="session")
def tiny_weights(tiny_config):
    return ModelWeights.init(tiny_config, seed=7)


@pytest.fixture
def tiny_seq(tiny_weights):
    return make_sequence(tiny_weights, seed=3, audio_len=6, text_len=2)


@pytest.fixture(scope="session")
def six_layer_weights():
    cfg = ModelConfig(num_layers=6, hidden_dim=16, ffn_dim=32, num_heads=2, vocab_size=32, max_positions=64)
    return ModelWeights.init(cfg, seed=42)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_log():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number, name, ok, detail=""):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
