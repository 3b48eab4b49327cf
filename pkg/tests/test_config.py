from pathlib import Path

import allure
import pytest

from conftest import REPO_ROOT
from primvol.config import THREADS_ENV, ConfigError, RunConfig, Settings, load_settings
from primvol.fade import FadeParams


@allure.feature("Settings")
class TestSettings:
    def test_defaults_without_file(self):
        settings = load_settings(None)
        assert settings == Settings()
        assert settings.render.step == 0.02

    def test_repository_config(self):
        settings = load_settings(REPO_ROOT / "config.yaml")
        assert settings.seed == 42
        assert settings.nprim_grid == 8
        assert settings.generator.geo_widths == [128, 128]
        assert settings.distill.latent_mode == "teacher"
        assert settings.loss.lambda_perc == 20.0

    def test_camel_case_keys(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("render:\n  fadeExponent: 4\n  background: [0.1, 0.2, 0.3]\nfit:\n  batchViews: 3\n", encoding="utf-8")
        settings = load_settings(path)
        assert settings.render.fade_exponent == 4.0
        assert settings.fit.batch_views == 3
        assert settings.render_options().background == (0.1, 0.2, 0.3)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_settings(tmp_path / "none.yaml")

    @pytest.mark.parametrize(
        "text",
        [
            "render: [1, 2]\n",
            "- a\n- b\n",
            "seed: abc\n",
            "distill:\n  latentMode: other\n",
            "render:\n  fadeSchedule: cosine\n",
            "key: [unclosed\n",
        ],
    )
    def test_invalid(self, tmp_path, text):
        path = tmp_path / "c.yaml"
        path.write_text(text, encoding="utf-8")
        with pytest.raises(ConfigError):
            load_settings(path)

    def test_render_options(self):
        settings = Settings()
        settings.render.fade_enabled = False
        opts = settings.render_options(threads=3, step=0.05)
        assert opts.threads == 3 and opts.step == 0.05
        assert opts.fade == FadeParams(exponent=8.0, enabled=False)

    def test_fade_schedule_uses_fade_rate(self):
        settings = Settings()
        settings.render.fade_schedule = "anneal"
        schedule = settings.fade_schedule()
        assert schedule.mode == "anneal"
        assert schedule.rate == settings.loss.lambda_fade

    def test_generator_config(self):
        config = Settings().generator_config(n_prim=16, latent_dim=5)
        assert config.n_prim == 16 and config.latent_dim == 5
        assert config.geo_widths == (128, 128)


@allure.feature("Threads")
class TestThreads:
    def test_override_wins(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "7")
        assert Settings(threads=2).resolved_threads(override=4) == 4

    def test_config_before_environment(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "7")
        assert Settings(threads=2).resolved_threads() == 2

    def test_environment_fallback(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "6")
        assert Settings().resolved_threads() == 6

    def test_default_single_thread(self, monkeypatch):
        monkeypatch.delenv(THREADS_ENV, raising=False)
        assert Settings().resolved_threads() == 1

    def test_bad_environment(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "many")
        with pytest.raises(ConfigError):
            Settings().resolved_threads()


@allure.feature("Run config")
class TestRunConfig:
    def test_require_names_flags(self):
        run = RunConfig(command="invert", settings=Settings(), threads=1)
        with pytest.raises(ConfigError, match="--ckpt") as info:
            run.require("checkpoint", "dataset")
        assert "--dataset" in str(info.value)

    def test_output_dir(self, tmp_path):
        run = RunConfig(command="fit", settings=Settings(), threads=1)
        assert run.output_dir() == Path("artifacts") / "fit"
        run.out = tmp_path
        assert run.output_dir() == tmp_path
