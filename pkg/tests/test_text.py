import re

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from chatpainter.scenes import Dialogue, dialogue_of, sample_scene
from chatpainter.text import (
    PAD,
    SEP,
    UNK,
    FlatDialogueEncoder,
    RecurrentDialogueEncoder,
    SentenceEncoder,
    Vocabulary,
    caption_tokens,
    encode_bundle,
    flat_dialogue_tokens,
    pad_token_batch,
    prepare_token_batch,
    recurrent_turn_token_lists,
    tokenize,
    turn_tokens,
)
from _gradcheck import max_relative_grad_error


def small_vocab():
    return Vocabulary.from_texts(["a red circle", "the background is blue", "row 0 column 2"])


class TestTokenize:
    def test_examples(self):
        assert tokenize("Hello, World!") == ["hello", "world"]
        assert tokenize("in row 0 column 2") == ["in", "row", "0", "column", "2"]
        assert tokenize("") == []
        assert tokenize("  --  ") == []
        assert tokenize("it's") == ["it", "s"]

    @given(st.text(max_size=80))
    @settings(max_examples=200, deadline=None)
    def test_tokens_are_lowercase_alnum_runs(self, text):
        for tok in tokenize(text):
            assert re.fullmatch(r"[a-z0-9]+", tok)

    @given(st.text(max_size=80))
    @settings(max_examples=200, deadline=None)
    def test_idempotent_after_join(self, text):
        toks = tokenize(text)
        assert tokenize(" ".join(toks)) == toks


class TestVocabulary:
    def test_specials_and_order(self):
        v = small_vocab()
        assert v.tokens[:3] == [PAD, UNK, SEP]
        assert v.tokens[3:] == sorted(v.tokens[3:])
        assert v.index[PAD] == 0 and v.index[UNK] == 1 and v.index[SEP] == 2

    def test_encode_with_unknown_fallback(self):
        v = small_vocab()
        ids = v.encode(["red", "mystery", SEP])
        assert ids[0] == v.index["red"]
        assert ids[1] == v.index[UNK]
        assert ids[2] == 2

    def test_save_load_round_trip(self, tmp_path):
        v = small_vocab()
        v.save(tmp_path / "vocab.txt")
        w = Vocabulary.load(tmp_path / "vocab.txt")
        assert w.tokens == v.tokens

    def test_rejects_duplicates_and_missing_specials(self):
        with pytest.raises(ValueError):
            Vocabulary([PAD, UNK, SEP, "a", "a"])
        with pytest.raises(ValueError):
            Vocabulary(["a", "b", "c"])


class TestTokenLayouts:
    def test_turn_tokens(self):
        assert turn_tokens("a b", "c", trailing_sep=False) == ["a", "b", SEP, "c"]
        assert turn_tokens("a b", "c", trailing_sep=True) == ["a", "b", SEP, "c", SEP]

    def test_flat_is_concatenated_turn_blocks(self):
        d = dialogue_of(sample_scene(3))
        flat = flat_dialogue_tokens(d)
        blocks = [turn_tokens(q, a, trailing_sep=True) for q, a in d.turns]
        assert flat == [t for b in blocks for t in b]
        assert flat[-1] == SEP

    def test_recurrent_lists_have_no_trailing_sep(self):
        lists = recurrent_turn_token_lists(dialogue_of(sample_scene(3)))
        assert len(lists) == 10
        for toks in lists:
            assert toks[-1] != SEP
            assert SEP in toks

    def test_pad_token_batch(self):
        v = small_vocab()
        ids, mask = pad_token_batch(v, [["red"], ["red", "circle", "blue"]])
        assert ids.shape == (2, 3) and mask.shape == (2, 3)
        assert ids[0, 1] == 0 and ids[0, 2] == 0
        assert mask.tolist() == [[1.0, 0.0, 0.0], [1.0, 1.0, 1.0]]
        ids, _ = pad_token_batch(v, [[]], min_len=4)
        assert ids.shape == (1, 4)


class TestSentenceEncoder:
    def setup_method(self):
        torch.manual_seed(0)
        self.vocab = small_vocab()
        self.enc = SentenceEncoder(len(self.vocab), 8, 6)

    def test_shape_and_range(self):
        ids, mask = pad_token_batch(self.vocab, [["red", "circle"], ["blue"]])
        out = self.enc(ids, mask)
        assert out.shape == (2, 6)
        assert out.abs().max() < 1.0

    def test_padding_does_not_change_output(self):
        ids1, mask1 = pad_token_batch(self.vocab, [["red", "circle"]])
        ids2, mask2 = pad_token_batch(self.vocab, [["red", "circle"]], min_len=9)
        assert torch.equal(self.enc(ids1, mask1), self.enc(ids2, mask2))

    def test_token_order_irrelevant(self):
        a, am = pad_token_batch(self.vocab, [["red", "circle", "blue"]])
        b, bm = pad_token_batch(self.vocab, [["blue", "red", "circle"]])
        assert torch.allclose(self.enc(a, am), self.enc(b, bm), atol=1e-6)

    def test_empty_row_is_affine_image_of_zero(self):
        ids, mask = pad_token_batch(self.vocab, [[]])
        out = self.enc(ids, mask)
        assert torch.equal(out[0], torch.tanh(self.enc.proj.bias))

    def test_single_token_oracle(self):
        tok = "red"
        ids, mask = pad_token_batch(self.vocab, [[tok]])
        out = self.enc(ids, mask)
        emb = self.enc.embedding.weight[self.vocab.index[tok]]
        expected = torch.tanh(self.enc.proj(emb))
        assert torch.allclose(out[0], expected, atol=1e-7)

    def test_mismatched_mask_rejected(self):
        ids, mask = pad_token_batch(self.vocab, [["red"]])
        with pytest.raises(ValueError):
            self.enc(ids, mask[:, :0])

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(1)
        enc = SentenceEncoder(len(self.vocab), 5, 4).double()
        ids, mask = pad_token_batch(self.vocab, [["red", "circle"], ["blue", "0", "2"]])
        target = torch.randn(2, 4, dtype=torch.float64)
        loss_fn = lambda: ((enc(ids, mask) - target) ** 2).sum()
        err = max_relative_grad_error(loss_fn, list(enc.parameters()), n_coords=4)
        assert err < 1e-4, err


class TestFlatDialogueEncoder:
    def test_repeated_turn_equals_single_block(self):
        # ten copies of one turn pool to the same mean as a single block
        torch.manual_seed(0)
        vocab = Vocabulary.from_texts(["what color is the background the background is red"])
        enc = FlatDialogueEncoder(len(vocab), 8, 6)
        turn = ("what color is the background", "the background is red")
        d = Dialogue(turns=(turn,) * 10)
        flat_ids, flat_mask = pad_token_batch(vocab, [flat_dialogue_tokens(d)])
        one_ids, one_mask = pad_token_batch(vocab, [turn_tokens(*turn, trailing_sep=True)])
        assert torch.allclose(enc(flat_ids, flat_mask), enc(one_ids, one_mask), atol=1e-5)

    def test_turn_order_irrelevant(self):
        torch.manual_seed(0)
        d1 = dialogue_of(sample_scene(8))
        d2 = Dialogue(turns=tuple(reversed(d1.turns)))
        vocab = Vocabulary.from_texts([" ".join(q + " " + a for q, a in d1.turns)])
        enc = FlatDialogueEncoder(len(vocab), 8, 6)
        i1, m1 = pad_token_batch(vocab, [flat_dialogue_tokens(d1)])
        i2, m2 = pad_token_batch(vocab, [flat_dialogue_tokens(d2)])
        assert torch.allclose(enc(i1, m1), enc(i2, m2), atol=1e-5)


class TestRecurrentDialogueEncoder:
    def make(self, vocab, seed=0):
        torch.manual_seed(seed)
        return RecurrentDialogueEncoder(len(vocab), 8, d_turn=6, h_rnn=5)

    def batch(self, vocab, dialogues):
        class Holder:
            def __init__(self, d):
                self.caption = "x"
                self.dialogue = d

        return prepare_token_batch(vocab, [Holder(d) for d in dialogues], "recurrent")

    def test_output_dim_and_turn_order_sensitivity(self):
        d1 = dialogue_of(sample_scene(8))
        d2 = Dialogue(turns=tuple(reversed(d1.turns)))
        vocab = Vocabulary.from_texts([" ".join(q + " " + a for q, a in d1.turns)])
        enc = self.make(vocab)
        assert enc.out_dim == 10
        tb = self.batch(vocab, [d1, d2])
        out = enc(tb.turn_ids, tb.turn_mask)
        assert out.shape == (2, 10)
        assert not torch.allclose(out[0], out[1], atol=1e-4)

    def test_batching_matches_single_sample(self):
        specs = [sample_scene(i) for i in (1, 2)]
        dialogues = [dialogue_of(s) for s in specs]
        vocab = Vocabulary.from_texts(
            [" ".join(q + " " + a for q, a in d.turns) for d in dialogues]
        )
        enc = self.make(vocab)
        both = self.batch(vocab, dialogues)
        out_both = enc(both.turn_ids, both.turn_mask)
        for i, d in enumerate(dialogues):
            single = self.batch(vocab, [d])
            out_one = enc(single.turn_ids, single.turn_mask)
            assert torch.allclose(out_both[i], out_one[0], atol=1e-6)

    def test_rejects_flat_ids(self):
        vocab = small_vocab()
        enc = self.make(vocab)
        ids, mask = pad_token_batch(vocab, [["red"]])
        with pytest.raises(ValueError):
            enc(ids, mask)

    def test_gradients_match_finite_differences(self):
        d = dialogue_of(sample_scene(4))
        vocab = Vocabulary.from_texts([" ".join(q + " " + a for q, a in d.turns)])
        torch.manual_seed(2)
        enc = RecurrentDialogueEncoder(len(vocab), 4, d_turn=3, h_rnn=3).double()
        tb = self.batch(vocab, [d])
        target = torch.randn(1, 6, dtype=torch.float64)
        loss_fn = lambda: ((enc(tb.turn_ids, tb.turn_mask) - target) ** 2).sum()
        err = max_relative_grad_error(loss_fn, list(enc.parameters()), n_coords=3)
        assert err < 1e-4, err


class TestBundles:
    def make_inputs(self, variant, n=3):
        samples = []

        class Holder:
            pass

        specs = [sample_scene(i) for i in range(n)]
        texts = []
        for s in specs:
            h = Holder()
            from chatpainter.scenes import caption_of

            h.caption = caption_of(s)
            h.dialogue = dialogue_of(s)
            samples.append(h)
            texts.append(h.caption)
            texts.extend(q + " " + a for q, a in h.dialogue.turns)
        vocab = Vocabulary.from_texts(texts)
        return vocab, samples

    def test_variant_widths(self):
        vocab, samples = self.make_inputs("flat")
        torch.manual_seed(0)
        cap = SentenceEncoder(len(vocab), 8, 6)
        flat = FlatDialogueEncoder(len(vocab), 8, 7)
        rec = RecurrentDialogueEncoder(len(vocab), 8, d_turn=6, h_rnn=5)

        tb = prepare_token_batch(vocab, samples, "flat")
        b = encode_bundle(cap, flat, tb)
        assert b.phi_t.shape == (3, 6) and b.zeta_d.shape == (3, 7) and b.e.shape == (3, 13)

        tb = prepare_token_batch(vocab, samples, "recurrent")
        b = encode_bundle(cap, rec, tb)
        assert b.zeta_d.shape == (3, 10) and b.e.shape == (3, 16)

        tb = prepare_token_batch(vocab, samples, "none")
        b = encode_bundle(cap, None, tb)
        assert b.zeta_d.shape == (3, 0)
        assert torch.equal(b.e, b.phi_t)

    def test_concatenation_layout(self):
        vocab, samples = self.make_inputs("flat")
        torch.manual_seed(0)
        cap = SentenceEncoder(len(vocab), 8, 6)
        flat = FlatDialogueEncoder(len(vocab), 8, 7)
        tb = prepare_token_batch(vocab, samples, "flat")
        b = encode_bundle(cap, flat, tb)
        assert torch.equal(b.e[:, :6], b.phi_t)
        assert torch.equal(b.e[:, 6:], b.zeta_d)

    def test_rolled_is_a_derangement(self):
        vocab, samples = self.make_inputs("none", n=4)
        torch.manual_seed(0)
        cap = SentenceEncoder(len(vocab), 8, 6)
        tb = prepare_token_batch(vocab, samples, "none")
        b = encode_bundle(cap, None, tb)
        r = b.rolled()
        for i in range(4):
            assert torch.equal(r.e[i], b.e[(i + 1) % 4])

    def test_prepare_rejects_unknown_variant(self):
        vocab, samples = self.make_inputs("none")
        with pytest.raises(ValueError):
            prepare_token_batch(vocab, samples, "transformer")

    def test_token_batch_select(self):
        vocab, samples = self.make_inputs("recurrent")
        tb = prepare_token_batch(vocab, samples, "recurrent")
        sub = tb.select([2, 0])
        assert torch.equal(sub.caption_ids[0], tb.caption_ids[2])
        assert torch.equal(sub.turn_ids[1], tb.turn_ids[0])
        assert sub.flat_ids is None
