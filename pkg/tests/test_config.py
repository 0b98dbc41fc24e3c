import pytest
from hypothesis import given
from hypothesis import strategies as st

from cecs.config import ConfigError, RunConfig, coerce, lr_at_epoch, parse_config


def test_defaults(tmp_path):
    empty = tmp_path / "empty.cfg"
    empty.write_text("")
    cfg = parse_config(empty)
    assert cfg == RunConfig()
    assert (cfg.n, cfg.q, cfg.batch_size, cfg.momentum, cfg.lr_decay_every) == (7, 2, 4, 0.9, 60)
    assert (cfg.epochs, cfg.image_side, cfg.flip_prob, cfg.eps, cfg.cos_weight) == (60, 56, 0.5, 1e-8, 1.0)


def test_published_lr_values():
    assert RunConfig.published().lr0 == 0.0008
    assert RunConfig.published().epochs == 180 and RunConfig.published().image_side == 448


def test_flag_beats_file(tmp_path):
    f = tmp_path / "a.cfg"
    f.write_text("q = 3  # from file\nmode = ce\n")
    cfg = parse_config(f, {"q": 1})
    assert cfg.q == 1 and cfg.mode == "ce"
    assert parse_config(f, {"q": "1"}).q == 1


def test_invariant_error_cites_lines(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("# comment\nn = 7\nimage_side = 50\n")
    with pytest.raises(ConfigError, match=r"line 3.*line 2.*not divisible by n=7|line 2.*line 3"):
        parse_config(f)


def test_q_greater_than_n(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("n = 2\nq = 3\nimage_side = 56\n")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config(f)


def test_unknown_key_has_line(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("mode = ce\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match=r":2: unknown key"):
        parse_config(f)
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(None, {"bogus": 1})


def test_unparsable_value(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("epochs = many\n")
    with pytest.raises(ConfigError, match=r":1: cannot parse"):
        parse_config(f)


def test_missing_equals(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("epochs 3\n")
    with pytest.raises(ConfigError, match=":1:"):
        parse_config(f)


@pytest.mark.parametrize("kw", [dict(q=0), dict(q=8), dict(momentum=1.0), dict(momentum=-0.1), dict(lr0=-1.0),
                                dict(image_side=54), dict(mode="mix"), dict(batch_size=0), dict(flip_prob=2.0),
                                dict(split="thirds")])
def test_invalid(kw):
    with pytest.raises(ConfigError):
        RunConfig(**kw).validate()


def test_dump_roundtrip(tmp_path):
    cfg = RunConfig(mode="ce", q=3, lr0=0.0123, cos_third_pair=True, data="some/dir")
    f = tmp_path / "r.cfg"
    f.write_text(cfg.dump())
    assert parse_config(f) == cfg


def test_coerce_bool():
    assert coerce("cos_third_pair", "yes") is True
    assert coerce("cos_third_pair", "false") is False
    with pytest.raises(ConfigError):
        coerce("cos_third_pair", "maybe")


def test_lr_schedule_exact():
    cfg = RunConfig.published()
    assert lr_at_epoch(cfg, 0) == 0.0008
    assert lr_at_epoch(cfg, 59) == 0.0008
    assert lr_at_epoch(cfg, 60) == 0.00008
    assert lr_at_epoch(cfg, 120) == 8e-6
    assert lr_at_epoch(cfg, 179) == 8e-6
    with pytest.raises(ValueError):
        lr_at_epoch(cfg, -1)


@given(st.integers(0, 1000), st.integers(1, 100))
def test_lr_is_piecewise_constant_and_decreasing(epoch, every):
    cfg = RunConfig(lr0=0.5, lr_decay_every=every)
    assert lr_at_epoch(cfg, epoch) == lr_at_epoch(cfg, epoch - epoch % every)
    later, now = lr_at_epoch(cfg, epoch + every), lr_at_epoch(cfg, epoch)
    assert later < now or later == now == 0.0
