"""Tests for the pipeline configuration file format."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import pytest

from toothfuse.config import (
    PipelineConfig,
    dump_config,
    load_config,
    parse_config,
    save_config,
)
from toothfuse.errors import ConfigError
from toothfuse.registration import DEFAULT_SCHEDULE, IcpScheduleLevel

# ---------------------------------------------------------------------------
# Dump / parse
# ---------------------------------------------------------------------------


class TestRoundTrip:
    """Tests for dump_config / parse_config."""

    def test_defaults(self) -> None:
        assert parse_config(dump_config(PipelineConfig())) == PipelineConfig()

    def test_modified(self) -> None:
        cfg = PipelineConfig(
            icp=(IcpScheduleLevel(voxel=0.8, max_distance=1.7, iterations=12),),
        ).with_seed(42)
        cfg = replace(
            cfg,
            fusion=replace(cfg.fusion, tau=0.45),
            ransac=replace(cfg.ransac, distance_threshold=1.25),
        )
        assert parse_config(dump_config(cfg)) == cfg

    def test_dump_lists_every_section(self) -> None:
        text = dump_config(PipelineConfig())
        for key in (
            "ransac.similarity=0.9",
            "ransac.distance_threshold=none",
            "icp.level2.voxel=0.25",
            "fusion.tau=0.6",
            "network.hidden=",
            "train.epochs=",
            "fit.iterations=",
            "grid.resolution=",
            "synth.root_count=",
        ):
            assert key in text

    def test_file_round_trip(self, tmp_path: Path) -> None:
        cfg = PipelineConfig().with_seed(7)
        path = save_config(tmp_path / "run.conf", cfg)
        assert load_config(path) == cfg


class TestWithSeed:
    """Tests for seeding every component at once."""

    def test_all_seeds(self) -> None:
        cfg = PipelineConfig().with_seed(9)
        assert cfg.ransac.seed == 9
        assert cfg.registration.sample_seed == 9
        assert cfg.train.seed == 9
        assert cfg.fit.seed == 9
        assert cfg.metrics.seed == 9
        assert cfg.synth.seed == 9

    def test_other_settings_kept(self) -> None:
        cfg = PipelineConfig().with_seed(9)
        assert cfg.fusion == PipelineConfig().fusion
        assert cfg.icp == DEFAULT_SCHEDULE


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


class TestParse:
    """Tests for individual settings."""

    def test_empty_is_defaults(self) -> None:
        assert parse_config("") == PipelineConfig()

    def test_comments_and_blank_lines(self) -> None:
        cfg = parse_config("# header\n\nfusion.tau=0.5  # tighter\n")
        assert cfg.fusion.tau == 0.5

    def test_network_lives_in_train(self) -> None:
        cfg = parse_config("network.hidden=64\ntrain.epochs=3\n")
        assert cfg.train.network.hidden == 64
        assert cfg.train.epochs == 3

    def test_optional_threshold(self) -> None:
        assert parse_config("ransac.distance_threshold=1.5").ransac.distance_threshold == 1.5
        assert parse_config("ransac.distance_threshold=none").ransac.distance_threshold is None

    def test_partial_icp_schedule(self) -> None:
        cfg = parse_config("icp.level0.iterations=5\n")
        assert len(cfg.icp) == 1
        assert cfg.icp[0] == IcpScheduleLevel(
            voxel=DEFAULT_SCHEDULE[0].voxel,
            max_distance=DEFAULT_SCHEDULE[0].max_distance,
            iterations=5,
        )

    def test_extra_icp_level_needs_all_keys(self) -> None:
        text = "\n".join(
            [
                "icp.level0.iterations=5",
                "icp.level1.iterations=5",
                "icp.level2.iterations=5",
                "icp.level3.voxel=0.1",
            ]
        )
        with pytest.raises(ConfigError, match="level3"):
            parse_config(text)

    def test_icp_gap(self) -> None:
        with pytest.raises(ConfigError, match="gaps"):
            parse_config("icp.level0.voxel=1.0\nicp.level2.voxel=0.5\n")


class TestParseErrors:
    """Tests for error reporting."""

    def test_missing_equals(self) -> None:
        with pytest.raises(ConfigError, match="<config>:2"):
            parse_config("fusion.tau=0.6\nfusion.tau\n")

    def test_unknown_section(self) -> None:
        with pytest.raises(ConfigError, match="unknown setting"):
            parse_config("mesh.size=3")

    def test_unknown_key(self) -> None:
        with pytest.raises(ConfigError, match="fusion.radius"):
            parse_config("fusion.radius=3")

    def test_bad_number(self) -> None:
        with pytest.raises(ConfigError, match="bad value"):
            parse_config("train.epochs=many")

    def test_unknown_icp_key(self) -> None:
        with pytest.raises(ConfigError, match="unknown ICP setting"):
            parse_config("icp.level0.speed=2")

    def test_invalid_value(self) -> None:
        with pytest.raises(ConfigError):
            parse_config("fusion.tau=-1")

    def test_source_named(self, tmp_path: Path) -> None:
        path = tmp_path / "bad.conf"
        path.write_text("grid.resolution=1\n")
        with pytest.raises(ConfigError, match="bad.conf"):
            load_config(path)


class TestLoadConfig:
    """Tests for reading configuration files."""

    def test_none_is_defaults(self) -> None:
        assert load_config(None) == PipelineConfig()

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "missing.conf")
