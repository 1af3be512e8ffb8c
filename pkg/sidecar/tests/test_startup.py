"""Configuration resolution and the load-or-die startup contract."""

import pytest

from pagemine_sidecar import cli
from pagemine_sidecar.config import SidecarConfig
from pagemine_sidecar.models import StubDetector, StubSegmenter


class TestConfig:
    def test_defaults(self):
        cfg = SidecarConfig.from_env(env={})
        assert cfg.device == "cpu"
        assert cfg.port == 8601
        assert cfg.detector
        assert cfg.segmenter

    def test_env_overrides(self):
        env = {
            "SIDECAR_DETECTOR": "local/detector-ckpt",
            "SIDECAR_SEGMENTER": "local/segmenter-ckpt",
            "SIDECAR_DEVICE": "cuda",
            "SIDECAR_PORT": "9001",
        }
        cfg = SidecarConfig.from_env(env=env)
        assert cfg.detector == "local/detector-ckpt"
        assert cfg.segmenter == "local/segmenter-ckpt"
        assert cfg.device == "cuda"
        assert cfg.port == 9001

    def test_bad_port_rejected(self):
        with pytest.raises(ValueError):
            SidecarConfig.from_env(env={"SIDECAR_PORT": "not-a-port"})


class TestStartup:
    def test_flags_override_env(self, monkeypatch):
        monkeypatch.setenv("SIDECAR_DETECTOR", "from-env")
        seen = {}

        def fake_run(app, host, port):
            seen["host"] = host
            seen["port"] = port

        monkeypatch.setattr(cli.uvicorn, "run", fake_run)
        rc = cli.main(["--stub", "--detector", "from-flag", "--port", "7777"])
        assert rc == 0
        assert seen == {"host": "127.0.0.1", "port": 7777}

    def test_model_load_failure_exits_nonzero(self, monkeypatch):
        def broken_load(self):
            raise RuntimeError("checkpoint missing")

        monkeypatch.setattr(StubDetector, "load", broken_load)
        rc = cli.main(["--stub"])
        assert rc == 1

    def test_segmenter_load_failure_also_fatal(self, monkeypatch):
        def broken_load(self):
            raise RuntimeError("no weights")

        monkeypatch.setattr(StubSegmenter, "load", broken_load)
        rc = cli.main(["--stub"])
        assert rc == 1

    def test_entrypoint_propagates_exit_code(self, monkeypatch):
        monkeypatch.setattr(cli, "main", lambda argv=None: 1)
        with pytest.raises(SystemExit) as exc:
            cli.entrypoint()
        assert exc.value.code == 1
