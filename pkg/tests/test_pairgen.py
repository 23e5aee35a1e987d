import re

import numpy as np
import pytest

from errors import ConfigError, DomainError, EmptyResponse, InsufficientPairs, NetworkError
from services.pairgen import (
    PairgenService, RewriterConfig, RewriterMode, adjacent_merge_ratio, audit, build_pairs, edit_similarity,
    external_rewrite, random_boundaries, random_compress, rule_rewrite, summarize_audits, trace_seed,
)
from services.prompting import format_rewrite_prompt
from services.steering import ContrastivePair, RewriterTag
from services.sweep_eval import EvalItem, extract_boxed_answer
from services.trace_core import ReasoningTrace

RULES = RewriterConfig(max_merges_per_trace=3, short_step_tokens=12)


def normalized(text):
    return ' '.join(text.split())


def levenshtein_oracle(a, b):
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (ca != cb)))
        previous = current
    return previous[-1]


def make_pair(tokenizer, negative, positive, question='Q', question_id='q1'):
    return ContrastivePair(
        question=question,
        positive=ReasoningTrace.from_solution(question, positive, tokenizer, question_id),
        negative=ReasoningTrace.from_solution(question, negative, tokenizer, question_id),
        rewriter_tag=RewriterTag.RULE_BASED,
        question_id=question_id,
    )


class FakeClient:
    """Stands in for RewriterClient; replies with a canned text per call."""

    def __init__(self, reply):
        self.reply = reply
        self.prompts = []

    def complete(self, prompt):
        self.prompts.append(prompt)
        if isinstance(self.reply, Exception):
            raise self.reply
        return self.reply(prompt) if callable(self.reply) else self.reply


class TestRuleRewrite:
    def test_single_step_unchanged(self, make_trace, tokenizer):
        trace = make_trace(["Final Answer: \\boxed{3}"])
        assert rule_rewrite(trace, RULES, tokenizer) is trace

    def test_connective_rule(self, make_trace, tokenizer):
        config = RewriterConfig(short_step_tokens=0)
        assert rule_rewrite(make_trace(["A", "So B", "C"]), config, tokenizer).steps == ("A So B", "C")

    def test_merged_step_is_not_merged_again(self, make_trace, tokenizer):
        config = RewriterConfig(short_step_tokens=0)
        assert rule_rewrite(make_trace(["A", "So B", "So C"]), config, tokenizer).steps == ("A So B", "So C")

    def test_connectives_are_case_sensitive_whole_words(self, make_trace, tokenizer):
        config = RewriterConfig(short_step_tokens=0)
        trace = make_trace(["A", "so B", "Sometimes C"])
        assert rule_rewrite(trace, config, tokenizer) is trace

    def test_fixture_trace(self, trace_a_text, tokenizer):
        trace = ReasoningTrace.from_solution('Q', trace_a_text, tokenizer)
        s = list(trace.steps)
        rewritten = rule_rewrite(trace, RULES, tokenizer)
        assert rewritten.steps == (
            s[0],
            s[1] + " " + s[2],
            s[3] + " " + s[4],
            s[5] + " " + s[6],
            s[7],
        )

    def test_merge_cap(self, make_trace, tokenizer):
        config = RewriterConfig(max_merges_per_trace=1, short_step_tokens=100)
        assert rule_rewrite(make_trace(["a", "b", "c", "d"]), config, tokenizer).steps == ("a b", "c", "d")

    def test_zero_cap_is_identity(self, make_trace, tokenizer):
        trace = make_trace(["a", "b"])
        assert rule_rewrite(trace, RewriterConfig(max_merges_per_trace=0), tokenizer) is trace

    def test_conservative(self, tokenizer):
        rng = np.random.default_rng(5)
        words = ["So", "Then", "x", "=", "<<2*3=6>>6", "apples", "Therefore", "he", "has", "12.5"]
        for index in range(200):
            steps = [' '.join(rng.choice(words, size=int(rng.integers(1, 8)))) for _ in range(int(rng.integers(1, 9)))]
            steps.append(f"Final Answer: \\boxed{{{index}}}")
            trace = ReasoningTrace.from_solution('Q', '\n\n'.join(steps), tokenizer, f"q{index}")
            for positive in (rule_rewrite(trace, RULES, tokenizer),
                             random_compress(trace, index, min(2, trace.n_steps - 1), tokenizer)
                             if trace.n_steps > 1 else trace):
                assert normalized(positive.solution) == normalized(trace.solution)
                assert positive.n_steps <= trace.n_steps
                report = audit(make_pair(tokenizer, trace.solution, positive.solution))
                assert report.answer_preserved and report.markers_preserved


class TestRandomCompress:
    def test_two_steps_forced(self, make_trace, tokenizer):
        trace = make_trace(["a", "b"])
        for seed in range(5):
            assert random_compress(trace, seed, 1, tokenizer).steps == ("a b",)

    def test_deterministic(self, make_trace, tokenizer):
        trace = make_trace([f"s{i}" for i in range(10)])
        assert random_compress(trace, 3, 4, tokenizer) == random_compress(trace, 3, 4, tokenizer)

    def test_matches_sampler(self, make_trace, tokenizer):
        trace = make_trace([f"s{i}" for i in range(10)])
        removed = sorted(np.random.default_rng(7).choice(9, 3, replace=False).tolist())
        assert random_boundaries(10, 7, 3) == removed

        expected = ["s0"]
        for boundary in range(9):
            if boundary in removed:
                expected[-1] += f" s{boundary + 1}"
            else:
                expected.append(f"s{boundary + 1}")
        assert list(random_compress(trace, 7, 3, tokenizer).steps) == expected

    def test_too_many_merges(self, make_trace, tokenizer):
        with pytest.raises(DomainError):
            random_compress(make_trace(["a", "b"]), 0, 2, tokenizer)
        with pytest.raises(DomainError):
            random_compress(make_trace(["a", "b"]), 0, 0, tokenizer)

    def test_trace_seed_is_stable(self):
        assert trace_seed(7, 'q1') == trace_seed(7, 'q1')
        assert trace_seed(7, 'q1') != trace_seed(7, 'q2')


class TestAudit:
    def test_identity(self, tokenizer):
        text = "x = <<1+1=2>>2.\n\nFinal Answer: \\boxed{2}"
        report = audit(make_pair(tokenizer, text, text))
        assert report.edit_similarity == 1.0
        assert report.adjacent_merge_ratio == 0.0
        assert report.answer_preserved and report.markers_preserved
        assert report.passed

    def test_disjoint_equal_length(self):
        assert edit_similarity("aaaa", "bbbb") == 0.0

    def test_empty_strings(self):
        assert edit_similarity("", "") == 1.0

    def test_merge_ratio(self):
        assert adjacent_merge_ratio(8, 6) == pytest.approx(2 / 7, abs=1e-12)
        assert adjacent_merge_ratio(1, 1) == 0.0
        assert adjacent_merge_ratio(3, 5) == 0.0

    def test_edit_similarity_matches_dp_oracle(self):
        rng = np.random.default_rng(9)
        alphabet = list("ab c\n")
        for _ in range(20):
            a = ''.join(rng.choice(alphabet, size=int(rng.integers(0, 15))))
            b = ''.join(rng.choice(alphabet, size=int(rng.integers(1, 15))))
            expected = 1 - levenshtein_oracle(a, b) / max(len(a), len(b))
            assert edit_similarity(a, b) == pytest.approx(expected, abs=1e-9)

    def test_one_edit(self):
        assert edit_similarity("kitten", "sitten") == pytest.approx(1 - 1 / 6, abs=1e-12)

    def test_changed_answer(self, tokenizer):
        report = audit(make_pair(tokenizer, "a\n\n\\boxed{1,000}", "a b \\boxed{1000}"))
        assert report.answer_preserved
        report = audit(make_pair(tokenizer, "a\n\n\\boxed{7}", "a \\boxed{8}"))
        assert not report.answer_preserved
        assert not report.passed

    def test_markers_are_a_multiset(self, tokenizer):
        negative = "<<2+2=4>>4\n\n<<2+2=4>>4 again"
        assert audit(make_pair(tokenizer, negative, "<<2+2=4>>4 <<2+2=4>>4 again")).markers_preserved
        assert not audit(make_pair(tokenizer, negative, "<<2+2=4>>4 and 4 again")).markers_preserved

    def test_summary(self, tokenizer):
        reports = [
            audit(make_pair(tokenizer, "a\n\nb\n\n\\boxed{1}", "a b\n\n\\boxed{1}")),
            audit(make_pair(tokenizer, "a\n\n\\boxed{1}", "a\n\n\\boxed{2}")),
        ]
        summary = summarize_audits(reports)
        assert summary['n_pairs'] == 2
        assert summary['steps_neg'] == 2.5
        assert summary['steps_pos'] == 2.0
        assert summary['answer_preserved_pct'] == 50.0
        assert summary['markers_preserved_pct'] == 100.0


class TestExternalRewrite:
    def test_sends_filled_template(self, make_trace, tokenizer):
        trace = make_trace(["x.", "y.", "Final Answer: \\boxed{1}"], question='What?')
        client = FakeClient("  x. y.\n\nFinal Answer: \\boxed{1}\n")
        positive = external_rewrite(client, 'What?', trace, tokenizer)
        assert client.prompts == [format_rewrite_prompt('What?', trace.solution)]
        assert 'What?' in client.prompts[0] and trace.solution in client.prompts[0]
        assert positive.solution == "x. y.\n\nFinal Answer: \\boxed{1}"
        assert positive.question_id == trace.question_id

    def test_blank_response(self, make_trace, tokenizer):
        with pytest.raises(EmptyResponse):
            external_rewrite(FakeClient("   \n"), 'Q', make_trace(["a"]), tokenizer)


def items_and_negatives(tokenizer, count):
    items, negatives = [], {}
    for i in range(count):
        qid = f"q{i:02d}"
        question = f"What is {i} plus 1?"
        items.append(EvalItem(qid, question, str(i + 1)))
        solution = f"We start with {i}.\n\nSo adding 1 gives {i + 1}.\n\nFinal Answer: \\boxed{{{i + 1}}}"
        negatives[qid] = ReasoningTrace.from_solution(question, solution, tokenizer, qid)
    return items, negatives


class TestPairgenService:
    def test_rule_based_pairs_in_id_order(self, tiny_model, tokenizer):
        items, negatives = items_and_negatives(tokenizer, 6)
        pairs = build_pairs(tiny_model, list(reversed(items)), RULES, n_pairs=4, negatives=negatives)
        assert [p.question_id for p in pairs] == ['q00', 'q01', 'q02', 'q03']
        for pair in pairs:
            assert pair.rewriter_tag == RewriterTag.RULE_BASED
            assert pair.positive.n_steps < pair.negative.n_steps
            assert audit(pair).steps_pos <= audit(pair).steps_neg

    def test_order_invariance(self, tiny_model, tokenizer):
        items, negatives = items_and_negatives(tokenizer, 5)
        forward = build_pairs(tiny_model, items, RULES, n_pairs=3, negatives=negatives)
        backward = build_pairs(tiny_model, list(reversed(items)), RULES, n_pairs=3, negatives=negatives)
        assert forward == backward

    def test_identity_rewriter(self, tiny_model, tokenizer):
        items, negatives = items_and_negatives(tokenizer, 3)
        config = RewriterConfig(max_merges_per_trace=0)
        for pair in build_pairs(tiny_model, items, config, n_pairs=3, negatives=negatives):
            assert pair.positive == pair.negative

    def test_failed_audit_is_replaced(self, tiny_model, tokenizer):
        items, negatives = items_and_negatives(tokenizer, 4)

        def reply(prompt):
            if 'What is 1 plus 1?' in prompt:
                return "Start with 1.\n\nFinal Answer: \\boxed{3}"
            answer = re.search(r'What is (\d+) plus 1', prompt).group(1)
            return f"Start with {answer}, add 1.\n\nFinal Answer: \\boxed{{{int(answer) + 1}}}"

        config = RewriterConfig(mode=RewriterMode.EXTERNAL, endpoint='http://stub', model_name='m')
        service = PairgenService(tiny_model, config, client=FakeClient(reply))
        pairs = service.build_pairs(items, n_pairs=3, negatives=negatives)
        assert [p.question_id for p in pairs] == ['q00', 'q02', 'q03']
        assert service.exclusions == [{'question_id': 'q01', 'reason': 'answer not preserved'}]
        assert all(p.rewriter_tag == RewriterTag.EXTERNAL for p in pairs)

    def test_blank_rewrite_is_excluded(self, tiny_model, tokenizer):
        items, negatives = items_and_negatives(tokenizer, 2)
        config = RewriterConfig(mode=RewriterMode.EXTERNAL, endpoint='http://stub', model_name='m')
        service = PairgenService(tiny_model, config, client=FakeClient(""))
        with pytest.raises(InsufficientPairs):
            service.build_pairs(items, n_pairs=1, negatives=negatives)
        assert [e['question_id'] for e in service.exclusions] == ['q00', 'q01']
        assert service.exclusions[0]['reason'].startswith('EmptyResponse')

    def test_network_failure_aborts(self, tiny_model, tokenizer):
        items, negatives = items_and_negatives(tokenizer, 2)
        config = RewriterConfig(mode=RewriterMode.EXTERNAL, endpoint='http://stub', model_name='m')
        service = PairgenService(tiny_model, config, client=FakeClient(NetworkError("down")))
        with pytest.raises(NetworkError):
            service.build_pairs(items, n_pairs=1, negatives=negatives)

    def test_require_correct_negative(self, tiny_model, tokenizer):
        items, negatives = items_and_negatives(tokenizer, 3)
        items[0] = EvalItem('q00', items[0].question, '99')
        service = PairgenService(tiny_model, RULES)
        pairs = service.build_pairs(items, n_pairs=2, negatives=negatives, require_correct_negative=True)
        assert [p.question_id for p in pairs] == ['q01', 'q02']
        assert service.exclusions[0]['reason'] == 'negative answer does not match gold'

    def test_random_compression_mode(self, tiny_model, tokenizer):
        items, negatives = items_and_negatives(tokenizer, 3)
        config = RewriterConfig(mode=RewriterMode.RANDOM_COMPRESSION, merge_seed=11, k_merges=1)
        pairs = build_pairs(tiny_model, items, config, n_pairs=3, negatives=negatives)
        again = build_pairs(tiny_model, items, config, n_pairs=3, negatives=negatives)
        assert pairs == again
        for pair in pairs:
            assert pair.positive.n_steps == pair.negative.n_steps - 1
            assert pair.rewriter_tag == RewriterTag.RANDOM_COMPRESSION

    def test_reference_mode(self, tiny_model, tokenizer):
        config = RewriterConfig(mode=RewriterMode.REFERENCE)
        with pytest.raises(ConfigError):
            PairgenService(tiny_model, config)
        service = PairgenService(tiny_model, config, reference_model=tiny_model, max_new_tokens=8)
        items, negatives = items_and_negatives(tokenizer, 1)
        positive = service.rewrite(negatives['q00'])
        assert positive.question == negatives['q00'].question

    def test_generate_negatives(self, tiny_model, questions):
        items = [EvalItem(f"q{i}", q, "1") for i, q in enumerate(questions[:2])]
        service = PairgenService(tiny_model, RULES, max_new_tokens=12, workers=2)
        traces = service.generate_negatives(items, samples_per_question=2)
        assert [(t.question_id, t.sample_index) for t in traces] == [('q0', 0), ('q0', 1), ('q1', 0), ('q1', 1)]
        assert traces[0].solution == traces[1].solution
        assert service.generate_negatives([]) == []

    def test_failed_generation_is_reported(self, tiny_model):
        items = [EvalItem('q0', 'x' * 600, '1'), EvalItem('q1', 'short', '1')]
        service = PairgenService(tiny_model, RULES, max_new_tokens=4)
        traces = service.generate_negatives(items)
        assert [t.question_id for t in traces] == ['q1']
        assert service.failures['q0'].startswith('LengthError')

    def test_bad_counts(self, tiny_model):
        with pytest.raises(DomainError):
            PairgenService(tiny_model, RULES).build_pairs([], n_pairs=0)
        with pytest.raises(ConfigError):
            PairgenService(tiny_model, RewriterConfig(mode=RewriterMode.RANDOM_COMPRESSION))
        with pytest.raises(ConfigError):
            PairgenService(tiny_model, RewriterConfig(mode=RewriterMode.EXTERNAL))


def test_boxed_answer_survives_rewrite(trace_a_text, tokenizer):
    trace = ReasoningTrace.from_solution('Q', trace_a_text, tokenizer)
    assert extract_boxed_answer(rule_rewrite(trace, RULES, tokenizer).solution) == '6'
