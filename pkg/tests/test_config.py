import json
import logging

import pytest

from wegpipe import hooks
from wegpipe.core.config import PipelineConfig, load_config, with_overrides
from wegpipe.core.errors import ConfigError


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    """Keep a developer's .env and WEGPIPE_* variables out of these tests."""
    monkeypatch.chdir(tmp_path)
    names = ["WEGPIPE_SEED", "WEGPIPE_THREADS", "WEGPIPE_OUTPUT_DIR", "WEGPIPE_DATASET_DIR", "WEGPIPE_WEIGHTS"]
    names += [f"WEGPIPE_{event}_HOOK" for event in ("START", "COMPLETE", "ERROR")]
    for name in names:
        # setenv first so teardown also undoes values a .env file loads
        monkeypatch.setenv(name, "")
        monkeypatch.delenv(name)


def test_defaults() -> None:
    config = load_config()
    assert config.explain.explainer == "dtd"
    assert config.explain.blocks == "last"
    assert config.refine.sr == pytest.approx(0.55)
    assert config.label.fg_thr == pytest.approx(0.3)
    assert config.label.tau_sal == pytest.approx(0.5)
    assert config.model.num_blocks == 6 and config.model.embed_dim == 64
    assert config.train.epochs == 15 and config.train.batch_size == 16
    assert config.worker_count() >= 1


def test_file_then_env_then_overrides(tmp_path, monkeypatch) -> None:
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"threads": 2, "paths": {"output_dir": "from-file"}, "refine": {"sr": 0.4}}))
    assert load_config(path).paths.output_dir == "from-file"

    monkeypatch.setenv("WEGPIPE_OUTPUT_DIR", "'from-env'")
    monkeypatch.setenv("WEGPIPE_THREADS", "3")
    config = load_config(path)
    assert config.paths.output_dir == "from-env"
    assert config.threads == 3
    assert config.refine.sr == pytest.approx(0.4)

    config = load_config(path, overrides={"paths.output_dir": "from-flag", "threads": None})
    assert config.paths.output_dir == "from-flag"
    assert config.threads == 3


def test_env_ignored_when_disabled(monkeypatch) -> None:
    monkeypatch.setenv("WEGPIPE_THREADS", "5")
    assert load_config(use_env=False).threads is None


def test_dotenv_file_is_read(tmp_path) -> None:
    (tmp_path / ".env").write_text("WEGPIPE_DATASET_DIR=/data/shapes\n")
    assert load_config().paths.dataset_dir == "/data/shapes"


def test_run_seed_drives_shuffling(tmp_path, monkeypatch) -> None:
    path = tmp_path / "seeded.json"
    path.write_text(json.dumps({"seed": 7, "train": {"epochs": 2}}))
    config = load_config(path)
    assert (config.seed, config.train.seed, config.train.epochs) == (7, 7, 2)

    monkeypatch.setenv("WEGPIPE_SEED", "9")
    config = load_config()
    assert (config.seed, config.train.seed) == (9, 9)


def test_explicit_train_seed_is_kept(tmp_path) -> None:
    path = tmp_path / "seeded.json"
    path.write_text(json.dumps({"seed": 7, "train": {"seed": 3}}))
    config = load_config(path)
    assert (config.seed, config.train.seed) == (7, 3)
    assert with_overrides(config, {"seed": 11}).train.seed == 3
    assert with_overrides(load_config(), {"seed": 11}).train.seed == 11


@pytest.mark.parametrize(
    "content",
    [
        "{not json",
        "[1, 2]",
        '{"refine": {"sr": 0}}',
        '{"explain": {"explainer": "gradcam"}}',
        '{"explain": {"blocks": "first"}}',
        '{"model": {"num_classes": 4}}',
    ],
    ids=["syntax", "not-object", "zero-rate", "explainer", "blocks", "class-mismatch"],
)
def test_invalid_files_raise_config_error(tmp_path, content: str) -> None:
    path = tmp_path / "bad.json"
    path.write_text(content)
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_file_raises_config_error(tmp_path) -> None:
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.json")


def test_block_lists_are_accepted() -> None:
    assert load_config(overrides={"explain.blocks": "0,2"}).explain.blocks == "0,2"
    assert load_config(overrides={"explain.blocks": [1, 3]}).explain.blocks == [1, 3]


def test_with_overrides_returns_validated_copy() -> None:
    base = PipelineConfig()
    variant = with_overrides(base, {"explain.explainer": "cam", "label.epom": False})
    assert variant.explain.explainer == "cam" and not variant.label.epom
    assert base.explain.explainer == "dtd" and base.label.epom
    with pytest.raises(ConfigError):
        with_overrides(base, {"refine.sr": 2.0})


def test_no_hook_configured_does_nothing(monkeypatch) -> None:
    def fail(*args, **kwargs):
        raise AssertionError("no hook should run")

    monkeypatch.setattr(hooks.subprocess, "Popen", fail)
    hooks.trigger_hook("start", {"task_id": "0000"})


def test_command_hook_gets_json_argument(monkeypatch) -> None:
    calls = []
    monkeypatch.setenv("WEGPIPE_COMPLETE_HOOK", "/usr/local/bin/notify")
    monkeypatch.setattr(hooks.subprocess, "Popen", lambda args, **kwargs: calls.append(args))
    hooks.trigger_hook("complete", {"task_id": "0001", "status": "completed"})
    assert calls[0][0] == "/usr/local/bin/notify"
    assert json.loads(calls[0][1]) == {"task_id": "0001", "status": "completed"}


def test_url_hook_posts_json(monkeypatch) -> None:
    sent = []

    class Response:
        def close(self) -> None:
            pass

    def urlopen(request, timeout):
        sent.append((request.full_url, json.loads(request.data), timeout))
        return Response()

    monkeypatch.setenv("WEGPIPE_ERROR_HOOK", "https://hooks.example.org/wegpipe")
    monkeypatch.setattr(hooks.urllib.request, "urlopen", urlopen)
    hooks.trigger_hook("error", {"task_id": "0002", "error": "boom"})
    assert sent == [("https://hooks.example.org/wegpipe", {"task_id": "0002", "error": "boom"}, 5)]


def test_hook_failure_is_logged_not_raised(monkeypatch, caplog) -> None:
    def broken(*args, **kwargs):
        raise OSError("no such file")

    monkeypatch.setenv("WEGPIPE_START_HOOK", "missing-command")
    monkeypatch.setattr(hooks.subprocess, "Popen", broken)
    with caplog.at_level(logging.ERROR, logger="wegpipe.hooks"):
        hooks.trigger_hook("start", {"task_id": "0003"})
    assert "Failed to execute start hook" in caplog.text
