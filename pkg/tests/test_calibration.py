"""Calibration arithmetic, plausibility masking, hysteresis selection, and
the per-step decode pipeline on fully scripted scenarios."""

import logging
import math

import numpy as np
import pytest

from htdc.backend import BranchKind, DecodeState, make_synthetic
from htdc.calibration import (
    CalibrationParams,
    EngineConfig,
    GateMode,
    HysteresisMode,
    calibrate,
    decode_step,
    differential_signals,
    masked_scores,
    plausibility_mask,
    select_with_hysteresis,
)
from htdc.candidates import Candidate, CandidateScores, CandidateSet
from htdc.errors import ConfigurationError
from htdc.hesitation import HesitationConfig

from scenario_helpers import scripted_scenario
from oracles import calibrate_oracle

YES_NO = CandidateSet(candidates=(Candidate("yes", (0,)), Candidate("no", (1,))))


def scores(labels, values):
    return CandidateScores(labels=tuple(labels), scores=np.asarray(values, dtype=np.float64))


def signals_of(labels, visual, semantic):
    full = scores(labels, np.zeros(len(labels)))
    v0 = scores(labels, -np.asarray(visual, dtype=np.float64))
    x0 = scores(labels, -np.asarray(semantic, dtype=np.float64))
    return differential_signals(full, v0, x0)


def calm_rows(final, n_layers=2):
    return {str(j): list(final) for j in range(n_layers)}


def swing_rows(ps):
    """Rows over a 4-token vocab whose first-two-token mass follows ps."""
    return {
        str(j): [math.log(p), math.log(1.0 - p), -9.0, -9.0] for j, p in enumerate(ps)
    }


def one_step_backend(branches, vocab_size, num_layers):
    scenario = scripted_scenario(vocab_size, num_layers, [branches])
    return make_synthetic(scenario)


def run_step(branches, candidate_set, vocab_size=4, num_layers=4, **overrides):
    hes_kwargs = dict(sampled_layers=(0, 1), keyword_top_k=2)
    for key in list(overrides):
        if key in HesitationConfig.__dataclass_fields__:
            hes_kwargs[key] = overrides.pop(key)
    config = EngineConfig(
        hesitation=HesitationConfig(**hes_kwargs),
        calibration=CalibrationParams(**overrides),
    )
    backend = one_step_backend(branches, vocab_size, num_layers)
    state = DecodeState(scenario_id="unit", query_text="", prefix_tokens=(), step_index=0)
    return decode_step(state, backend, candidate_set, config)


class TestDifferentialSignals:
    def test_identical_probe_gives_zero_gap(self):
        full = scores(["a", "b"], [-0.4, -1.1])
        sig = differential_signals(full, full, scores(["a", "b"], [-0.7, -0.2]))
        assert sig.visual.tolist() == [0.0, 0.0]

    def test_sign_convention_full_minus_probe(self):
        full = scores(["yes"], [-0.2])
        x0 = scores(["yes"], [-0.1])
        sig = differential_signals(full, full, x0)
        assert sig.semantic[0] == pytest.approx(-0.1, abs=1e-15)

    def test_random_gaps_are_exact_subtraction(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n = int(rng.integers(2, 7))
            labels = tuple(f"c{i}" for i in range(n))
            f, v, x = (rng.normal(0.0, 2.0, size=n) for _ in range(3))
            sig = differential_signals(scores(labels, f), scores(labels, v), scores(labels, x))
            np.testing.assert_array_equal(sig.visual, f - v)
            np.testing.assert_array_equal(sig.semantic, f - x)

    def test_both_masked_candidate_gap_is_zero(self):
        full = scores(["a", "b"], [-np.inf, -0.5])
        probe = scores(["a", "b"], [-np.inf, -0.25])
        sig = differential_signals(full, probe, probe)
        assert sig.visual[0] == 0.0
        assert sig.visual[1] == -0.25

    def test_misaligned_labels_rejected(self):
        with pytest.raises(ConfigurationError, match="aligned"):
            differential_signals(
                scores(["a", "b"], [0.0, 0.0]),
                scores(["b", "a"], [0.0, 0.0]),
                scores(["a", "b"], [0.0, 0.0]),
            )


class TestCalibrate:
    def test_zero_coefficients_copy_exactly(self):
        full = scores(["a", "b"], [-0.123456789, -4.2])
        sig = signals_of(["a", "b"], [7.0, -3.0], [2.0, 2.0])
        out = calibrate(full, sig, 1.0, CalibrationParams(visual_coeff=0.0, semantic_coeff=0.0))
        np.testing.assert_array_equal(out.scores, full.scores)
        assert out.scores is not full.scores

    def test_zero_gate_copies_exactly(self):
        full = scores(["a", "b"], [-0.3, -0.9])
        sig = signals_of(["a", "b"], [5.0, 5.0], [5.0, 5.0])
        out = calibrate(full, sig, 0.0, CalibrationParams())
        np.testing.assert_array_equal(out.scores, full.scores)

    def test_worked_flip_example(self):
        full = scores(["first", "second"], [-1.0, -0.5])
        sig = signals_of(["first", "second"], [0.4, -0.1], [0.3, -0.6])
        out = calibrate(full, sig, 1.0, CalibrationParams())
        np.testing.assert_allclose(out.scores, [-0.3, -1.2], rtol=0, atol=1e-12)
        assert full.argmax_label == "second"
        assert out.argmax_label == "first"

    def test_single_coefficient_paths(self):
        full = scores(["a"], [-1.0])
        sig = signals_of(["a"], [0.5], [0.25])
        only_v = calibrate(full, sig, 1.0, CalibrationParams(semantic_coeff=0.0))
        only_x = calibrate(full, sig, 1.0, CalibrationParams(visual_coeff=0.0))
        assert only_v.scores[0] == pytest.approx(-0.5, abs=1e-15)
        assert only_x.scores[0] == pytest.approx(-0.75, abs=1e-15)

    def test_masked_candidate_stays_masked(self):
        full = scores(["a", "b"], [-np.inf, -0.5])
        probe = scores(["a", "b"], [-np.inf, -0.1])
        sig = differential_signals(full, probe, probe)
        out = calibrate(full, sig, 1.0, CalibrationParams())
        assert out.scores[0] == -np.inf
        assert np.isfinite(out.scores[1])

    def test_gate_scales_linearly(self):
        full = scores(["a", "b"], [0.0, 0.0])
        sig = signals_of(["a", "b"], [1.0, -1.0], [0.0, 0.0])
        half = calibrate(full, sig, 0.5, CalibrationParams())
        np.testing.assert_allclose(half.scores, [0.5, -0.5], rtol=0, atol=1e-15)

    def test_gate_outside_unit_interval_rejected(self):
        full = scores(["a"], [0.0])
        sig = signals_of(["a"], [0.0], [0.0])
        for bad in (-0.1, 1.1):
            with pytest.raises(ConfigurationError, match="gate weight"):
                calibrate(full, sig, bad, CalibrationParams())

    def test_misaligned_signals_rejected(self):
        full = scores(["a", "b"], [0.0, 0.0])
        sig = signals_of(["b", "a"], [0.0, 0.0], [0.0, 0.0])
        with pytest.raises(ConfigurationError, match="aligned"):
            calibrate(full, sig, 1.0, CalibrationParams())

    def test_matches_oracle_on_random_tuples(self):
        rng = np.random.default_rng(71)
        for _ in range(300):
            n = int(rng.integers(2, 7))
            labels = tuple(f"c{i}" for i in range(n))
            f = rng.normal(0.0, 2.0, size=n)
            dv = rng.normal(0.0, 1.0, size=n)
            dx = rng.normal(0.0, 1.0, size=n)
            gate = float(rng.uniform(0.0, 1.0))
            lv = float(rng.choice([0.0, 0.5, 1.0, 2.0]))
            lx = float(rng.choice([0.0, 0.5, 1.0, 2.0]))
            sig = signals_of(labels, dv, dx)
            out = calibrate(
                scores(labels, f), sig, gate,
                CalibrationParams(visual_coeff=lv, semantic_coeff=lx),
            )
            ref = calibrate_oracle(f.tolist(), dv.tolist(), dx.tolist(), gate, lv, lx)
            np.testing.assert_allclose(out.scores, ref, rtol=0, atol=1e-12)


class TestPlausibilityMask:
    def test_k_at_vocab_accepts_everything(self, yes_no):
        mask = plausibility_mask(np.array([0.0, 1.0, 2.0, 3.0, 4.0, 5.0]), 6, yes_no)
        assert mask.tolist() == [True, True]

    def test_k_above_vocab_is_clamped(self, yes_no):
        mask = plausibility_mask(np.zeros(6), 200, yes_no)
        assert mask.tolist() == [True, True]

    def test_top3_cut_on_descending_logits(self):
        cands = CandidateSet(candidates=(Candidate("A", (0,)), Candidate("B", (5,))))
        mask = plausibility_mask(np.array([5.0, 4.0, 3.0, 2.0, 1.0, 0.0]), 3, cands)
        assert mask.tolist() == [True, False]

    def test_multi_token_candidate_needs_any_token_inside(self):
        cands = CandidateSet(candidates=(Candidate("AB", (0, 5)), Candidate("C", (4, 5))))
        mask = plausibility_mask(np.array([5.0, 4.0, 3.0, 2.0, 1.0, 0.0]), 3, cands)
        assert mask.tolist() == [True, False]

    def test_tie_at_cut_prefers_lower_id(self):
        cands = CandidateSet(candidates=(Candidate("lo", (1,)), Candidate("hi", (2,))))
        mask = plausibility_mask(np.array([1.0, 0.0, 0.0, 0.0]), 2, cands)
        assert mask.tolist() == [True, False]

    def test_all_ineligible_is_representable(self):
        cands = CandidateSet(candidates=(Candidate("A", (3,)),))
        mask = plausibility_mask(np.array([5.0, 4.0, 3.0, 0.0]), 2, cands)
        assert not mask.any()

    def test_nonpositive_k_rejected(self, yes_no):
        with pytest.raises(ConfigurationError):
            plausibility_mask(np.zeros(6), 0, yes_no)


class TestMaskedScores:
    def test_ineligible_entries_become_neg_inf(self):
        out = masked_scores(scores(["a", "b", "c"], [1.0, 2.0, 3.0]), np.array([True, False, True]))
        assert out.scores.tolist() == [1.0, -np.inf, 3.0]
        assert out.labels == ("a", "b", "c")

    def test_mask_shape_mismatch_rejected(self):
        with pytest.raises(ConfigurationError, match="mask"):
            masked_scores(scores(["a", "b"], [1.0, 2.0]), np.array([True]))


class TestSelectWithHysteresis:
    def test_winner_challenging_itself_is_kept(self):
        cal = scores(["a", "b"], [1.0, 0.0])
        assert select_with_hysteresis(cal, "a", 0.0) == "a"

    def test_zero_margin_flips_on_exact_tie(self):
        cal = scores(["a", "b"], [0.5, 0.5])
        assert select_with_hysteresis(cal, "b", 0.0) == "a"

    def test_small_advantage_is_retained_under_margin(self):
        cal = scores(["a", "b"], [0.0, 0.05])
        assert select_with_hysteresis(cal, "a", 0.1) == "a"

    def test_clear_advantage_flips(self):
        cal = scores(["a", "b"], [0.0, 0.2])
        assert select_with_hysteresis(cal, "a", 0.1) == "b"

    def test_challenger_tie_break_is_set_order(self):
        cal = scores(["a", "b", "c"], [0.0, 1.0, 1.0])
        assert select_with_hysteresis(cal, "a", 0.0) == "b"

    def test_mixed_scale_defends_on_original_score(self):
        cal = scores(["a", "b"], [-0.2, 0.3])
        full = scores(["a", "b"], [0.9, -2.0])
        kept = select_with_hysteresis(
            cal, "a", 0.1, mode=HysteresisMode.MIXED_SCALE, full=full
        )
        assert kept == "a"
        assert select_with_hysteresis(cal, "a", 0.1) == "b"

    def test_mixed_scale_without_full_scores_rejected(self):
        cal = scores(["a", "b"], [0.0, 1.0])
        with pytest.raises(ConfigurationError, match="mixed_scale"):
            select_with_hysteresis(cal, "a", 0.1, mode=HysteresisMode.MIXED_SCALE)

    def test_negative_margin_rejected(self):
        cal = scores(["a", "b"], [0.0, 1.0])
        with pytest.raises(ConfigurationError):
            select_with_hysteresis(cal, "a", -0.01)

    def test_flip_set_shrinks_with_margin(self):
        rng = np.random.default_rng(13)
        margins = [0.0, 0.05, 0.1, 0.2]
        for _ in range(200):
            n = int(rng.integers(2, 6))
            labels = tuple(f"c{i}" for i in range(n))
            cal = scores(labels, rng.normal(0.0, 1.0, size=n))
            incumbent = labels[int(rng.integers(0, n))]
            outcomes = [select_with_hysteresis(cal, incumbent, m) for m in margins]
            for narrow, wide in zip(outcomes, outcomes[1:]):
                if wide != incumbent:
                    assert narrow == wide


class TestCalibrationParamsValidation:
    def test_string_enums_are_coerced(self):
        p = CalibrationParams(gate_mode="static", hysteresis_mode="mixed_scale")
        assert p.gate_mode is GateMode.STATIC
        assert p.hysteresis_mode is HysteresisMode.MIXED_SCALE

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            CalibrationParams(gate_mode="sometimes")

    def test_bad_scalars_rejected(self):
        with pytest.raises(ConfigurationError):
            CalibrationParams(plausibility_top_k=0)
        with pytest.raises(ConfigurationError):
            CalibrationParams(hysteresis_margin=-0.05)


class TestDecodeStep:
    QUIET = {"full": {"final": [2.0, 1.0, 0.0, -1.0], "layers": calm_rows([1.0, 0.5, 0.0, 0.0])},
             "v0": {"final": [2.0, 1.0, 0.0, -1.0]},
             "x0": {"final": [1.0, 2.0, 0.0, -1.0]}}

    def oscillating(self, v0_final=None, x0_final=None):
        final = [3.0, 2.0, 0.0, 0.0]
        return {
            "full": {"final": final, "layers": swing_rows([0.3, 0.7, 0.3])},
            "v0": {"final": list(v0_final or final)},
            "x0": {"final": list(x0_final or final)},
        }

    def test_quiet_step_spends_one_pass(self, caplog):
        result = run_step(self.QUIET, YES_NO)
        assert result.forward_passes == 1
        assert not result.triggered
        assert not result.flipped
        assert result.chosen_label == "yes"
        assert result.v0_scores is None
        assert result.calibrated_scores is None

    def test_gate_threshold_one_forces_plain_greedy(self):
        branches = self.oscillating(x0_final=[0.0, 5.0, 0.0, 0.0])
        result = run_step(
            branches, YES_NO, sampled_layers=(0, 1, 2), min_gate_weight=1.0
        )
        assert result.forward_passes == 1
        assert not result.triggered
        assert result.chosen_label == "yes"

    def test_neutral_probes_change_nothing(self):
        result = run_step(self.oscillating(), YES_NO, sampled_layers=(0, 1, 2))
        assert result.triggered
        assert result.forward_passes == 3
        np.testing.assert_array_equal(result.signals.visual, [0.0, 0.0])
        np.testing.assert_array_equal(result.signals.semantic, [0.0, 0.0])
        np.testing.assert_array_equal(
            result.calibrated_scores.scores, result.full_scores.scores
        )
        assert result.chosen_label == "yes"
        assert not result.flipped

    def test_prior_bias_worked_example_flips_to_no(self):
        # full-branch log-probs land exactly on (-0.60, -0.80) and the
        # semantic probe on (-0.30, -1.40) via an absorbing filler token
        full_final = [-0.60, -0.80, math.log(1.0 - math.exp(-0.60) - math.exp(-0.80))]
        x0_final = [-0.30, -1.40, math.log(1.0 - math.exp(-0.30) - math.exp(-1.40))]
        branches = {
            "full": {"final": full_final, "layers": calm_rows(full_final)},
            "v0": {"final": full_final},
            "x0": {"final": x0_final},
        }
        result = run_step(branches, YES_NO, vocab_size=3, gate_mode=GateMode.STATIC)
        np.testing.assert_allclose(
            result.full_scores.scores, [-0.60, -0.80], rtol=0, atol=1e-12
        )
        np.testing.assert_allclose(
            result.signals.semantic, [-0.30, 0.60], rtol=0, atol=1e-12
        )
        np.testing.assert_allclose(
            result.calibrated_scores.scores, [-0.90, -0.20], rtol=0, atol=1e-12
        )
        assert result.chosen_label == "no"
        assert result.flipped
        assert result.forward_passes == 3

    def test_static_mode_probes_regardless_of_hesitation(self):
        result = run_step(
            self.QUIET, YES_NO, gate_mode=GateMode.STATIC, min_gate_weight=1.0
        )
        assert result.triggered
        assert not result.hesitation.triggered
        assert result.forward_passes == 3

    def test_static_gate_is_full_strength(self):
        branches = dict(self.QUIET)
        result = run_step(branches, YES_NO, gate_mode=GateMode.STATIC)
        expected = result.full_scores.scores + (
            result.signals.visual + result.signals.semantic
        )
        np.testing.assert_allclose(
            result.calibrated_scores.scores, expected, rtol=0, atol=1e-12
        )

    def test_soft_only_scales_by_gate_weight(self):
        result = run_step(self.QUIET, YES_NO, gate_mode=GateMode.SOFT_ONLY)
        assert result.triggered
        assert result.forward_passes == 3
        gate = result.hesitation.gate_weight
        assert gate < 0.5
        expected = result.full_scores.scores + gate * (
            result.signals.visual + result.signals.semantic
        )
        np.testing.assert_allclose(
            result.calibrated_scores.scores, expected, rtol=0, atol=1e-12
        )

    def test_ineligible_candidate_never_wins_despite_calibration(self):
        cands = CandidateSet(candidates=(Candidate("A", (0,)), Candidate("B", (5,))))
        final = [5.0, 4.0, 3.0, 2.0, 1.0, 0.0]
        branches = {
            "full": {"final": final, "layers": calm_rows(final)},
            "v0": {"final": final},
            "x0": {"final": [5.0, 4.0, 3.0, 2.0, 1.0, -20.0]},
        }
        result = run_step(
            branches, cands, vocab_size=6,
            gate_mode=GateMode.STATIC, plausibility_top_k=3,
        )
        assert result.calibrated_scores.score_of("B") > result.calibrated_scores.score_of("A")
        assert result.chosen_label == "A"
        assert not result.flipped

    def test_fail_open_when_nothing_is_plausible(self, caplog):
        cands = CandidateSet(candidates=(Candidate("A", (4,)), Candidate("B", (5,))))
        final = [5.0, 4.0, 3.0, 2.0, 1.0, 0.0]
        branches = {
            "full": {"final": final, "layers": calm_rows(final)},
            "v0": {"final": final},
            "x0": {"final": final},
        }
        with caplog.at_level(logging.WARNING, logger="htdc.calibration"):
            result = run_step(
                branches, cands, vocab_size=6,
                gate_mode=GateMode.STATIC, plausibility_top_k=2,
            )
        assert "falling back" in caplog.text
        assert not result.eligibility.any()
        assert result.chosen_label == "A"
        assert not result.flipped

    def test_unresolved_layers_rejected(self):
        backend = one_step_backend(self.QUIET, 4, 4)
        state = DecodeState(scenario_id="unit", query_text="", prefix_tokens=(), step_index=0)
        config = EngineConfig(hesitation=HesitationConfig(keyword_top_k=2))
        with pytest.raises(ConfigurationError, match="unresolved"):
            decode_step(state, backend, YES_NO, config)

    def test_forward_pass_accounting(self):
        for branches, kwargs in [
            (self.QUIET, {}),
            (self.oscillating(), {"sampled_layers": (0, 1, 2)}),
            (self.QUIET, {"gate_mode": GateMode.SOFT_ONLY}),
            (self.QUIET, {"gate_mode": GateMode.STATIC}),
        ]:
            result = run_step(branches, YES_NO, **kwargs)
            assert result.forward_passes == (3 if result.triggered else 1)
            if result.flipped:
                assert result.triggered
