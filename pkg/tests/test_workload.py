import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coserve.workload import (HEADER, Burst, LogNormal, Record, Trace, dumps, generate, loads, read,
                              rescale, write)


def test_rate_zero_is_empty():
    assert len(generate(0, 100, 0)) == 0


def test_poisson_count():
    tr = generate(11, 1200, 4.0)
    assert abs(len(tr) - 4800) <= 208


def test_mean_rate_over_seeds():
    n = [len(generate(s, 600, 8.0, Burst(60, 0.5))) for s in range(10)]
    assert np.mean(n) / 600 == pytest.approx(8.0, rel=0.05)


def test_burst_modulates_rate():
    t = np.array([r.time_ms for r in generate(2, 600, 20.0, Burst(60, 0.9)).records]) / 1e3
    phase = (t % 60) / 60
    high, low = np.sum(phase < 0.5), np.sum(phase >= 0.5)
    assert high > 2 * low


def test_deterministic():
    assert dumps(generate(5, 30, 6.0, ft_sequences=10)) == dumps(generate(5, 30, 6.0, ft_sequences=10))
    assert dumps(generate(5, 30, 6.0)) != dumps(generate(6, 30, 6.0))


def test_lengths_in_range():
    tr = generate(3, 200, 10.0, ft_sequences=200)
    for r in tr.records:
        if r.kind == "inf":
            assert 16 <= r.prompt_len <= 4096 and 8 <= r.gen_len <= 1024
        else:
            assert 64 <= r.seq_len <= 8192 and r.time_ms == 0.0


def test_tenant_shares():
    tr = generate(4, 600, 10.0, tenants={"a": 3, "b": 1})
    frac = sum(r.tenant == "a" for r in tr.records) / len(tr)
    assert frac == pytest.approx(0.75, abs=0.03)


@pytest.mark.parametrize("kw", [dict(burst=Burst(60, 1.5)), dict(burst=Burst(0, 0.2)), dict(rate_rps=-1)])
def test_invalid(kw):
    args = dict(seed=0, duration_s=10, rate_rps=1.0) | kw
    with pytest.raises(ValueError):
        generate(**args)


def test_lognormal_clip():
    d = LogNormal(10.0, 0.1, 1, 100)
    assert set(d.sample(np.random.default_rng(0), 50)) == {100}


class TestRescale:
    def test_identity(self):
        tr = generate(1, 60, 5.0)
        assert dumps(rescale(tr, 1.0)) == dumps(tr)

    def test_doubles_rate(self):
        tr = generate(1, 60, 5.0)
        fast = rescale(tr, 2.0)
        assert [r.time_ms for r in fast.records] == pytest.approx([r.time_ms / 2 for r in tr.records], abs=1e-3)
        assert fast.meta["rate_rps"] == 10.0 and fast.meta["duration_s"] == 30.0

    @pytest.mark.parametrize("f", [0, -1])
    def test_bad_factor(self, f):
        with pytest.raises(ValueError):
            rescale(generate(1, 10, 1.0), f)


class TestFormat:
    def test_header(self):
        assert dumps(Trace([])).strip() == ",".join(HEADER)

    def test_round_trip_file(self, tmp_path):
        tr = generate(9, 60, 4.0, ft_sequences=5)
        p = tmp_path / "t.csv"
        write(tr, p)
        again = tmp_path / "u.csv"
        write(read(p), again)
        assert p.read_bytes() == again.read_bytes()

    def test_bad_header(self):
        with pytest.raises(ValueError):
            loads("a,b\n")

    def test_bad_row(self):
        with pytest.raises(ValueError, match="line 2"):
            loads(",".join(HEADER) + "\n0.000,t0,inf,0,5,\n")

    def test_unsorted(self):
        with pytest.raises(ValueError):
            Trace([Record(5.0, "t", "inf", 1, 1), Record(1.0, "t", "inf", 1, 1)])

    def test_seq_len_cap(self):
        with pytest.raises(ValueError):
            Record(0.0, "ft", "ft", seq_len=8193)


records = st.lists(st.one_of(
    st.builds(Record, st.floats(0, 1e6).map(lambda x: round(x, 3)), st.sampled_from(["t0", "x"]),
              st.just("inf"), st.integers(1, 4096), st.integers(1, 1024)),
    st.builds(Record, st.just(0.0), st.just("ft"), st.just("ft"), st.none(), st.none(), st.integers(1, 8192)),
), max_size=30).map(lambda rs: sorted(rs, key=lambda r: r.time_ms))


@given(records)
@settings(max_examples=100)
def test_round_trip_property(recs):
    text = dumps(Trace(recs))
    assert loads(text).records == recs
    assert dumps(loads(text)) == text
