"""LLM bridge tests: prompts, parsing, oracle round trips, client faults, RMSE."""

import json

import httpx
import numpy as np
import pytest

from glucogate.llm import (
    AlpacaRecord, ChatClient, ChatEndpointConfig, ChatPayloadError,
    ChatStatusError, ChatTimeoutError, ChatTransportError, LocalOracle,
    SeriesParseError, SeriesSpec, evaluate_rmse, format_forward_prompt,
    format_inverse_record, format_number, generate_dataset,
    parse_series_response, percentage_iob_series, serialize_series,
)

PUBLISHED_SERIES = [
    1.0, 0.99948, 0.99747, 0.99411, 0.98975, 0.98473, 0.97931, 0.97371,
    0.96808, 0.96254, 0.95717, 0.95205, 0.94719, 0.94264, 0.93839,
    0.93446, 0.93084, 0.92752, 0.92448, 0.92171, 0.9192, 0.91693,
    0.91488, 0.91303, 0.91137, 0.90988, 0.90855, 0.90735, 0.90629,
    0.90534, 0.90449, 0.90374, 0.90307, 0.90248, 0.90195, 0.90148,
    0.90107, 0.90071, 0.90038, 0.9001,
]


class TestFormatNumber:
    def test_keeps_decimal_point(self):
        assert format_number(1.0) == "1.0"

    def test_five_significant_digits(self):
        assert format_number(0.999480001) == "0.99948"
        assert format_number(0.9192) == "0.9192"

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            format_number(float("nan"))


class TestPercentageSeries:
    def test_matches_published_shape(self):
        s = percentage_iob_series(0.015)
        assert s[0] == 1.0
        d = np.diff(s)
        assert np.all(d < 0)                        # strictly decreasing
        assert abs(d[0]) < abs(d[1])                # slow start
        assert 0.88 < s[-1] < 0.92                  # plateau near 0.90
        assert np.max(np.abs(s - np.array(PUBLISHED_SERIES))) < 5e-4

    def test_first_ten_strictly_decreasing_for_small_k1(self):
        for k1 in (0.005, 0.008, 0.02, 0.04):
            s = percentage_iob_series(k1)
            d = np.diff(s[:10])
            assert np.all(d < 0)

    def test_rejects_nonpositive_k1(self):
        with pytest.raises(ValueError):
            percentage_iob_series(0.0)


class TestForwardPrompt:
    def test_contains_parameter_line(self):
        p = format_forward_prompt(0.025)
        assert "diffusion_parameter = 0.025" in p
        assert "### Instruction:" in p
        assert "### Input:" in p

    def test_template_substitution(self):
        p = format_forward_prompt(0.015)
        assert "diffusion_parameter = 0.015" in p

    def test_byte_stability(self):
        assert format_forward_prompt(0.025) == format_forward_prompt(0.025)


class TestInverseRecord:
    def test_round_trips_published_example_parameter(self):
        spec = SeriesSpec()
        series = percentage_iob_series(0.015, spec)
        rec = format_inverse_record(series, 0.015, spec)
        assert rec.output == "0.015"
        assert rec.input.startswith("1.0 ")
        assert "400 seconds" in rec.instruction

    def test_constant_series_serialization(self):
        spec = SeriesSpec(sample_count=4)
        rec = format_inverse_record([1.0, 1.0, 1.0, 1.0], 0.02, spec)
        assert rec.input == "1.0 1.0 1.0 1.0"

    def test_precision_rule(self):
        spec = SeriesSpec(sample_count=2)
        rec = format_inverse_record([0.999480001, 1.0], 0.02, spec)
        assert rec.input.split()[0] == "0.99948"

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            format_inverse_record([1.0, 0.9], 0.02, SeriesSpec(sample_count=40))

    def test_parser_recovers_serialized_values(self):
        spec = SeriesSpec()
        rng = np.random.default_rng(4)
        for _ in range(10):
            series = percentage_iob_series(float(rng.uniform(0.008, 0.04)), spec)
            rec = format_inverse_record(series, 0.02, spec)
            parsed = parse_series_response("### Response: " + rec.input)
            reserialized = serialize_series(parsed, spec)
            assert reserialized == rec.input

    def test_markers_render(self):
        rec = AlpacaRecord(instruction="do x", input="1.0", output="0.5")
        text = rec.render()
        assert "### Instruction:" in text and "### Input:" in text \
            and "### Response:" in text


class TestParseSeriesResponse:
    def test_paper_response_form(self):
        assert parse_series_response("Your timeseries is 1.0, 0.9995") == [1.0, 0.9995]

    def test_inverse_response_form(self):
        assert parse_series_response("### Response: 0.015") == [0.015]

    def test_takes_last_response_marker(self):
        text = "### Response: 1.0 2.0\n### Response: 3.0 4.0"
        assert parse_series_response(text) == [3.0, 4.0]

    def test_no_numbers(self):
        with pytest.raises(SeriesParseError):
            parse_series_response("no numbers here")

    def test_scientific_notation(self):
        assert parse_series_response("Response: 1.5e-2, 2e3") == [0.015, 2000.0]


class TestLocalOracle:
    def test_round_trip_matches_serialized_simulation(self):
        spec = SeriesSpec()
        oracle = LocalOracle(spec)
        reply = oracle.query(format_forward_prompt(0.015, spec))
        parsed = parse_series_response(reply)
        sim = percentage_iob_series(0.015, spec)
        # parsing the oracle's reply returns exactly the serialized simulation
        assert serialize_series(parsed, spec) == serialize_series(sim, spec)

    def test_rmse_vs_raw_simulation_below_tenth_percent(self):
        spec = SeriesSpec()
        oracle = LocalOracle(spec)
        for k1 in (0.008, 0.015, 0.025):
            parsed = parse_series_response(oracle.query(format_forward_prompt(k1, spec)))
            sim = percentage_iob_series(k1, spec)
            assert evaluate_rmse(parsed, sim, spec.initial_iob) < 0.1

    def test_rejects_unparseable_prompt(self):
        with pytest.raises(SeriesParseError) as e:
            LocalOracle().query("### Instruction: find the parameter")
        assert "diffusion_parameter" in str(e.value)


class TestGenerateDataset:
    def test_single_record_matches_formatter(self, tmp_path):
        spec = SeriesSpec()
        path = generate_dataset(1, lambda rng: 0.015, spec, seed=1,
                                path=tmp_path / "d.jsonl")
        rec = json.loads(path.read_text().strip())
        expected = format_inverse_record(percentage_iob_series(0.015, spec), 0.015, spec)
        assert rec == {"instruction": expected.instruction,
                       "input": expected.input, "output": expected.output}

    def test_seed_reproducibility(self, tmp_path):
        spec = SeriesSpec()
        p1 = generate_dataset(5, None, spec, seed=42, path=tmp_path / "a.jsonl")
        p2 = generate_dataset(5, None, spec, seed=42, path=tmp_path / "b.jsonl")
        assert p1.read_bytes() == p2.read_bytes()

    def test_inputs_strictly_decreasing_initially(self, tmp_path):
        spec = SeriesSpec()
        path = generate_dataset(8, None, spec, seed=7, path=tmp_path / "c.jsonl")
        for line in path.read_text().splitlines():
            values = [float(v) for v in json.loads(line)["input"].split()]
            head = values[:10]
            assert all(a > b for a, b in zip(head, head[1:]))

    def test_size_validated(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(0, None, SeriesSpec(), seed=1, path=tmp_path / "x.jsonl")


def make_client(handler, retries=0, **cfg):
    config = ChatEndpointConfig(base_url="http://test/v1/chat", max_retries=retries, **cfg)
    return ChatClient(config, transport=httpx.MockTransport(handler))


class TestChatClient:
    def test_successful_completion(self):
        def handler(request):
            body = json.loads(request.content)
            assert body["model"] == "insulin-ft"
            assert body["messages"][0]["role"] == "user"
            return httpx.Response(200, json={
                "choices": [{"message": {"content": "### Response: 0.015"}}]})

        assert make_client(handler).query("prompt") == "### Response: 0.015"

    def test_timeout_after_retries(self):
        calls = []

        def handler(request):
            calls.append(1)
            raise httpx.ConnectTimeout("slow")

        with pytest.raises(ChatTimeoutError):
            make_client(handler, retries=2).query("prompt")
        assert len(calls) == 3

    def test_transport_error(self):
        def handler(request):
            raise httpx.ConnectError("refused")

        with pytest.raises(ChatTransportError):
            make_client(handler).query("prompt")

    def test_status_error(self):
        def handler(request):
            return httpx.Response(500, text="boom")

        with pytest.raises(ChatStatusError) as e:
            make_client(handler).query("prompt")
        assert e.value.status_code == 500

    def test_malformed_payload(self):
        def handler(request):
            return httpx.Response(200, json={"unexpected": True})

        with pytest.raises(ChatPayloadError):
            make_client(handler).query("prompt")

    def test_auth_header_from_env(self, monkeypatch):
        monkeypatch.setenv("TEST_CHAT_TOKEN", "sekrit")
        seen = {}

        def handler(request):
            seen["auth"] = request.headers.get("Authorization")
            return httpx.Response(200, json={
                "choices": [{"message": {"content": "ok"}}]})

        make_client(handler, auth_env_var="TEST_CHAT_TOKEN").query("p")
        assert seen["auth"] == "Bearer sekrit"


class TestEvaluateRmse:
    def test_identical(self):
        s = [1.0, 0.9, 0.8]
        assert evaluate_rmse(s, s) == 0.0

    def test_constant_offset_is_six_percent(self):
        ref = np.linspace(1.0, 0.9, 40)
        gen = ref + 0.06
        assert evaluate_rmse(gen, ref, initial_iob=1.0) == pytest.approx(6.0, rel=1e-9)

    def test_truncates_to_shorter(self):
        assert evaluate_rmse([1.0, 0.5, 99.0], [1.0, 0.5]) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            evaluate_rmse([], [])
