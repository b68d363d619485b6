import numpy as np
import pytest
import torch
from structlog.testing import capture_logs

from app.core.exceptions import EntropyCodingError, RangeCoderError
from app.models.latent_codec import EntropyParams, gaussian_conditional_likelihood
from app.services.cdf import GRID_SIZE, SYMBOL_CAP, TOTAL, CdfTable, build_cdf, quantize_pmf
from app.services.codec import LatentStreamCoder, _to_symbols
from app.services.range_coder import RangeDecoder, clamp_symbols, rc_decode, rc_encode


def uniform_over(symbols):
    def likelihood(grid):
        inside = (grid >= min(symbols)) & (grid <= max(symbols))
        return inside.double() / len(symbols)

    return likelihood


def random_table(rng: np.random.Generator) -> CdfTable:
    width = int(rng.integers(1, 40))
    start = int(rng.integers(0, GRID_SIZE - width))
    pmf = np.zeros(GRID_SIZE)
    pmf[start : start + width] = rng.random(width) ** 4 + 1e-4
    return quantize_pmf(pmf)


def is_valid(table: CdfTable) -> bool:
    counts = table.counts
    return table.cdf[0] == 0 and table.cdf[-1] == TOTAL and min(counts) >= 1


class TestBuildCdf:
    def test_uniform_four(self):
        table = build_cdf(uniform_over(range(4)))
        assert (table.s_min, table.s_max) == (0, 3)
        assert table.counts == [16384] * 4

    def test_standard_normal_covers_six_sigma(self):
        params = EntropyParams(
            mu=torch.zeros(1, dtype=torch.float64), sigma=torch.ones(1, dtype=torch.float64)
        )
        table = build_cdf(lambda grid: gaussian_conditional_likelihood(grid, params, floor=0.0))
        assert table.s_min <= -6 and table.s_max >= 6
        assert is_valid(table)
        assert table.counts[-table.s_min] == max(table.counts)

    def test_range_contains_requested_mode(self):
        pmf = np.zeros(GRID_SIZE)
        pmf[SYMBOL_CAP + 10] = 1.0
        pmf[SYMBOL_CAP + 11] = 1e-12
        table = quantize_pmf(pmf, mode=-3)
        assert table.s_min == -3
        assert is_valid(table)

    def test_random_tables_are_valid(self):
        rng = np.random.default_rng(0)
        assert all(is_valid(random_table(rng)) for _ in range(200))

    def test_degenerate_pmf(self):
        with pytest.raises(EntropyCodingError):
            quantize_pmf(np.zeros(GRID_SIZE))

    def test_wrong_grid(self):
        with pytest.raises(EntropyCodingError):
            quantize_pmf(np.ones(10))

    def test_table_must_increase(self):
        with pytest.raises(EntropyCodingError):
            CdfTable(s_min=0, s_max=1, cdf=(0, 0, TOTAL))

    def test_lookup_inverts_interval(self):
        table = build_cdf(uniform_over(range(-2, 3)))
        for symbol in range(table.s_min, table.s_max + 1):
            cum, freq = table.interval(symbol)
            assert table.lookup(cum) == symbol
            assert table.lookup(cum + freq - 1) == symbol


class TestRangeCoder:
    def test_empty_sequence(self):
        data = rc_encode([], [])
        assert len(data) <= 8
        assert rc_decode(data, [], 0) == []

    def test_uniform_byte_symbols(self):
        table = build_cdf(uniform_over(range(256)))
        rng = np.random.default_rng(1)
        symbols = rng.integers(0, 256, 1000).tolist()
        data = rc_encode(symbols, [table] * 1000)
        assert 1000 <= len(data) <= 1032
        assert rc_decode(data, [table] * 1000, 1000) == symbols

    def test_random_round_trips(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            n = int(rng.integers(0, 30))
            tables = [random_table(rng) for _ in range(n)]
            symbols = [int(rng.integers(t.s_min, t.s_max + 1)) for t in tables]
            assert rc_decode(rc_encode(symbols, tables), tables, n) == symbols

    def test_near_certain_symbols(self):
        pmf = np.full(GRID_SIZE, 1e-9)
        pmf[SYMBOL_CAP] = 1.0
        table = quantize_pmf(pmf)
        symbols = [0] * 5000 + [table.s_max, table.s_min] + [0] * 5000
        tables = [table] * len(symbols)
        data = rc_encode(symbols, tables)
        assert rc_decode(data, tables, len(symbols)) == symbols
        assert len(data) < 200

    def test_out_of_range_symbols_are_clamped(self):
        table = build_cdf(uniform_over(range(4)))
        with capture_logs() as logs:
            data = rc_encode([-7, 2, 9], [table] * 3, stream="y_l")
        assert rc_decode(data, [table] * 3, 3) == [0, 2, 3]
        assert [entry["event"] for entry in logs] == ["symbols_clamped"]
        assert logs[0]["count"] == 2

    def test_decoder_stops_at_stream_end(self):
        rng = np.random.default_rng(3)
        for n in (0, 1, 7, 300):
            tables = [random_table(rng) for _ in range(n)]
            symbols = [int(rng.integers(t.s_min, t.s_max + 1)) for t in tables]
            data = rc_encode(symbols, tables)
            decoder = RangeDecoder(data)
            assert [decoder.decode(table) for table in tables] == symbols
            assert decoder.position == len(data)

    def test_truncated_stream(self):
        table = build_cdf(uniform_over(range(16)))
        data = rc_encode(list(range(16)) * 4, [table] * 64)
        with pytest.raises(RangeCoderError):
            rc_decode(data[:-1], [table] * 64, 64)

    def test_corrupt_stream(self):
        table = build_cdf(uniform_over(range(4)))
        with pytest.raises(RangeCoderError):
            RangeDecoder(b"\xff" * 5).decode(table)

    def test_count_mismatch(self):
        table = build_cdf(uniform_over(range(4)))
        with pytest.raises(RangeCoderError):
            rc_decode(rc_encode([1], [table]), [table], 2)
        with pytest.raises(RangeCoderError):
            clamp_symbols([1, 2], [table])


class TestLatentStreams:
    def test_round_trip_and_rate_bound(self, toy_model, generator):
        compressor = toy_model.compressor.eval()
        coder = LatentStreamCoder(compressor)
        shape_tables, hyper_tables = coder.shape_tables(), coder.hyper_tables()
        for _ in range(100):
            x = torch.rand(1, 32, 3, generator=generator) * 2 - 1
            with torch.no_grad():
                latents = compressor(x, mode="test").latents
                estimate = float(compressor.estimate_rate(latents))
            payloads, _ = coder.encode(latents)
            decoded = coder.decode(payloads)

            y_l, _ = clamp_symbols(_to_symbols(latents.y_l_hat), shape_tables)
            z, _ = clamp_symbols(_to_symbols(latents.z_hat), hyper_tables)
            detail = coder.detail_tables(coder._hyper_tensor(z))
            y_h, _ = clamp_symbols(_to_symbols(latents.y_h_hat), detail)
            assert _to_symbols(decoded.y_l_hat) == y_l
            assert _to_symbols(decoded.z_hat) == z
            assert _to_symbols(decoded.y_h_hat) == y_h

            actual = 8 * sum(len(p) for p in payloads)
            assert actual <= 1.05 * estimate + 256
