"""Tokenizer, prompt assembly, decoding, LoRA contracts, accuracy metric."""

import numpy as np
import pytest

from dygenc import autodiff as ad
from dygenc.qa_lm import (
    EOS,
    GRAPH_CLOSE,
    GRAPH_OPEN,
    PROMPT_PREFIX,
    SPECIALS,
    Tokenizer,
    ToyDecoderLM,
    accuracy,
    answer_loss,
    assemble_prompt,
    generate,
    prompt_token_segments,
    word_tokenize,
)

CORPUS = [
    "which object did the person pick up after they opened the cabinet ?",
    "did the person ever open the door ?",
    "yes",
    "no",
    "cup",
    "the dish",
]


@pytest.fixture
def tok():
    return Tokenizer.build(CORPUS)


def small_lm(tok, lora=False, seed=0):
    return ToyDecoderLM(len(tok), np.random.default_rng(seed), d=32, num_layers=2, heads=2,
                        lora_enabled=lora, lora_r=4)


class TestTokenizer:
    def test_roundtrip_equals_normalized(self, tok):
        for s in CORPUS:
            assert tok.decode(tok.encode(s)) == " ".join(word_tokenize(s))

    def test_specials_lead_the_vocab(self, tok):
        assert tuple(tok.vocab[:6]) == SPECIALS

    def test_unknown_word_becomes_unk(self, tok):
        ids = tok.encode("xylophone")
        assert ids == [1]

    def test_all_unknown_question_warns(self, tok, caplog):
        import logging

        with caplog.at_level(logging.WARNING, logger="dygenc.qa_lm"):
            tok.encode("zzz qqq", warn_all_unknown=True)
        assert any("no known tokens" in r.getMessage() for r in caplog.records)


class TestPromptAssembly:
    def test_length_arithmetic_k1(self, tok):
        lm = small_lm(tok)
        question = "did the person open the"  # 5 known tokens
        assert len(tok.encode(question)) == 5
        h = ad.Tensor(np.zeros((1, 32)))
        prompt = assemble_prompt(h, question, lm, tok)
        prefix_len = len(tok.encode(PROMPT_PREFIX))
        assert prompt.shape[0] == prefix_len + 1 + 1 + 1 + 1 + 5

    def test_k16_adds_15_positions(self, tok):
        lm = small_lm(tok)
        q = "did the person ever open the door ?"
        p1 = assemble_prompt(ad.Tensor(np.zeros((1, 32))), q, lm, tok)
        p16 = assemble_prompt(ad.Tensor(np.zeros((16, 32))), q, lm, tok)
        assert p16.shape[0] == p1.shape[0] + 15

    def test_same_soft_tokens_share_first_segment(self, tok):
        lm = small_lm(tok)
        h = ad.Tensor(np.random.default_rng(0).normal(size=(2, 32)))
        a = assemble_prompt(h, "did the person ever open the door ?", lm, tok)
        b = assemble_prompt(h, "cup", lm, tok)
        before, _ = prompt_token_segments(tok, "ignored")
        cut = len(before) + 2
        assert np.array_equal(a.data[:cut], b.data[:cut])

    def test_soft_block_sits_between_markers(self, tok):
        before, after = prompt_token_segments(tok, "cup")
        assert before[-1] == GRAPH_OPEN
        assert after[0] == GRAPH_CLOSE
        assert after[1] == tok.index[","]


class TestGeneration:
    def test_untrained_model_contract(self, tok):
        lm = small_lm(tok)
        prompt = assemble_prompt(ad.Tensor(np.zeros((1, 32))), "did the person ever open the door ?", lm, tok)
        out = generate(lm, tok, prompt, max_len=8)
        assert isinstance(out, str)
        assert not any(sp in out for sp in SPECIALS)

    def test_greedy_is_deterministic(self, tok):
        lm = small_lm(tok, seed=3)
        h = ad.Tensor(np.random.default_rng(1).normal(size=(1, 32)))
        prompt = assemble_prompt(h, "cup", lm, tok)
        assert generate(lm, tok, prompt) == generate(lm, tok, prompt)

    def test_batched_generation_matches_single(self, tok):
        from dygenc.qa_lm import greedy_generate

        lm = small_lm(tok, seed=5)
        rng = np.random.default_rng(2)
        prompts = [
            assemble_prompt(ad.Tensor(rng.normal(size=(1, 32))), q, lm, tok)
            for q in ("cup", "did the person ever open the door ?", "the dish")
        ]
        batched = greedy_generate(lm, tok, prompts, max_len=6)
        singles = [generate(lm, tok, p, max_len=6) for p in prompts]
        assert batched == singles


class TestLora:
    def test_zero_init_adapter_is_identity(self, tok):
        base = small_lm(tok, lora=False, seed=7)
        adapted = small_lm(tok, lora=True, seed=7)
        x = ad.Tensor(np.random.default_rng(3).normal(size=(1, 6, 32)))
        lb = base.forward_embedded(x).data
        la = adapted.forward_embedded(x).data
        assert np.abs(lb - la).max() < 1e-12

    def test_adapter_params_are_separate_group(self, tok):
        lm = small_lm(tok, lora=True)
        assert len(lm.adapter_param_names()) == 2 * 2 * 2  # layers x targets x (a, b)
        assert all(n.startswith("lora.") for n in lm.adapter_param_names())


class TestAnswerLoss:
    def test_near_delta_logits_give_tiny_loss(self, tok):
        lm = small_lm(tok)
        ans = tok.encode("cup")
        prompt = assemble_prompt(ad.Tensor(np.zeros((1, 32))), "cup", lm, tok)
        forced = np.full((prompt.shape[0] + len(ans), len(tok)), 0.0)
        targets = ans + [EOS]
        for j, tgt in enumerate(targets):
            forced[prompt.shape[0] - 1 + j, tgt] = 30.0

        class Stub(ToyDecoderLM):
            def forward_embedded(self, x, **kw):
                return ad.Tensor(forced[None, :, :])

        stub = Stub(len(tok), np.random.default_rng(0), d=32, num_layers=2, heads=2)
        loss = answer_loss(stub, prompt, ans)
        assert loss.item() < 1e-3

    def test_loss_positive_for_untrained(self, tok):
        lm = small_lm(tok)
        prompt = assemble_prompt(ad.Tensor(np.zeros((1, 32))), "cup", lm, tok)
        loss = answer_loss(lm, prompt, tok.encode("yes"))
        assert loss.item() > 0.1


class TestAccuracy:
    def test_containment(self):
        assert accuracy("dish", "the dish") is True

    def test_containment_is_one_directional(self):
        assert accuracy("the dish", "dish") is False

    def test_normalization(self):
        assert accuracy("Dish ", "dish") is True
        assert accuracy("  YES", "yes") is True

    def test_empty_prediction_false(self):
        assert accuracy("", "dish") is False
        assert accuracy("   ", "dish") is False
