import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from litset.biencoder import (BatchLabelSpace, BiEncoder, EncoderConfig, build_batch_label_space,
                              decode_spans, gold_local_ids, in_batch_cross_entropy, inventory_hash,
                              predict, score)
from litset.corpus import O_ID, EntitySpan, Sentence, TypeInventory
from litset.encoders import HashingSubwordTokenizer, TinySpec, build_encoder

TINY = "tiny:layers=1,hidden=16,heads=2,vocab=512"


def model(**kw):
    return BiEncoder(EncoderConfig(TINY, TINY, max_sequence_length=kw.pop("max_len", 64), **kw))


def test_decode_io_runs():
    assert decode_spans(["O", "A", "A", "O", "B"]) == [EntitySpan(1, 3, "A"), EntitySpan(4, 5, "B")]
    assert decode_spans(["A", "B", "B"]) == [EntitySpan(0, 1, "A"), EntitySpan(1, 3, "B")]
    assert decode_spans([]) == []


def test_argmax_ties_resolve_to_o():
    assert predict(torch.tensor([[1.0, 1.0, 0.5], [0.0, 2.0, 2.0]])).tolist() == [0, 1]


def test_cross_entropy_hand_value():
    loss = in_batch_cross_entropy(torch.tensor([[2.0, 0.0]]), torch.tensor([0]))
    assert math.isclose(loss.item(), math.log(1 + math.exp(-2)), rel_tol=1e-6)


def test_cross_entropy_ignores_and_validates():
    logits = torch.tensor([[2.0, 0.0], [0.0, 5.0]])
    assert math.isclose(in_batch_cross_entropy(logits, torch.tensor([0, -100])).item(),
                        math.log(1 + math.exp(-2)), rel_tol=1e-6)
    with pytest.raises(ValueError):
        in_batch_cross_entropy(logits, torch.tensor([0, 2]))


def test_score_shape_mismatch():
    with pytest.raises(ValueError):
        score(torch.zeros(3, 4), torch.zeros(2, 5))


def test_batch_label_space_composition():
    inv = TypeInventory.from_ids(["a", "b", "c", "d"])
    batch = [Sentence(("x", "y"), (EntitySpan(0, 1, "c"), EntitySpan(1, 2, "a")))]
    space = build_batch_label_space(batch, inv)
    assert space.local_labels == (O_ID, "a", "c")
    padded = build_batch_label_space(batch, inv, negatives_m=3)
    assert padded.local_labels[:3] == (O_ID, "a", "c") and len(padded) == 4
    assert len(build_batch_label_space(batch, inv, negatives_m=10)) == 5
    with pytest.raises(ValueError):
        BatchLabelSpace(("a", O_ID))


def test_gold_ids_follow_alignment():
    space = BatchLabelSpace.from_types(["a", "b"])
    batch = [Sentence(("x", "y", "z"), (EntitySpan(1, 3, "b"),))]
    gold = gold_local_ids(batch, [[0, 1, None]], space)
    assert gold.tolist() == [0, 2]


def test_hashing_tokenizer_is_deterministic():
    tok = HashingSubwordTokenizer(100, 3)
    assert tok.word_ids("Baltimore") == tok.word_ids("baltimore")
    assert len(tok.word_ids("Baltimore")) == 3
    assert all(3 <= i < 100 for i in tok.word_ids("Baltimore"))


def test_tiny_spec_parse():
    assert TinySpec.parse("tiny:layers=3,hidden=8,dropout=0.1") == TinySpec(layers=3, hidden=8, dropout=0.1)


def test_truncation_marks_words_without_rows():
    m = model(max_len=8)
    e_t, alignment = m.encode_tokens([Sentence(tuple(["word"] * 20))])
    kept = [r for r in alignment[0] if r is not None]
    assert alignment[0][len(kept):] == [None] * (20 - len(kept))
    assert e_t.shape == (len(kept), 16) and 0 < len(kept) < 20


def test_empty_batch_raises():
    with pytest.raises(ValueError):
        model().encode_tokens([])


@settings(max_examples=20, deadline=None)
@given(st.lists(st.lists(st.sampled_from(["a", "bb", "Baltimore", "ü", "1999"]), min_size=1,
                         max_size=9), min_size=1, max_size=4))
def test_one_row_per_token(batch):
    m = model()
    e_t, alignment = m.encode_tokens(batch)
    assert e_t.shape[0] == sum(len(s) for s in batch)
    assert [len(a) for a in alignment] == [len(s) for s in batch]


def test_label_cache_only_in_eval_no_grad():
    m = model()
    m.eval()
    with torch.no_grad():
        first = m.encode_labels(["city", "person"])
        assert len(m._label_cache) == 2
        assert torch.equal(first, m.encode_labels(["city", "person"]))
    m.train()
    assert not m._label_cache
    m.encode_labels(["city"])
    assert not m._label_cache
    with pytest.raises(ValueError):
        m.encode_labels([" "])


def test_predict_spans_and_forward_shapes():
    m = model()
    inv = TypeInventory([("a", "city"), ("b", "person")])
    sents = [Sentence(("Paris", "is", "big")), Sentence(("Bob",))]
    space = BatchLabelSpace.from_types(["a", "b"])
    logits, alignment = m(sents, space, inv)
    assert logits.shape == (4, 3)
    preds = m.predict_spans(sents, ["a", "b"], inv, batch_size=1)
    assert len(preds) == 2
    assert all(sp.type_id in ("a", "b") for p in preds for sp in p)


def test_o_verbalization_override_and_learned_o():
    inv = TypeInventory([("a", "city")])
    space = BatchLabelSpace.from_types(["a"])
    m = model(o_verbalization="XO")
    m.eval()
    with torch.no_grad():
        e = m.label_space_embeddings(space, inv)
        assert torch.allclose(e[0], m.encode_labels(["XO"])[0])
    learned = model(learned_o=True)
    assert torch.equal(learned.label_space_embeddings(space, inv)[0], torch.zeros(16))


def test_checkpoint_round_trip(tmp_path):
    m = model(seed=3)
    inv = TypeInventory([("a", "city")])
    m.save(tmp_path, inv, {"phase": "lit"})
    back = BiEncoder.load(tmp_path)
    sents = [Sentence(("Paris", "is", "nice"))]
    space = BatchLabelSpace.from_types(["a"])
    m.eval()
    back.eval()
    with torch.no_grad():
        assert torch.equal(m(sents, space, inv)[0], back(sents, space, inv)[0])
    import json
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["inventory_hash"] == inventory_hash(inv)
    assert manifest["config"]["token_encoder_id"] == TINY


def test_same_seed_same_init():
    a, b = model(seed=5), model(seed=5)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_hidden_size_mismatch_rejected():
    with pytest.raises(ValueError):
        BiEncoder(EncoderConfig(TINY, "tiny:layers=1,hidden=8,heads=2,vocab=512"))


def _local_bert(tmp_path):
    transformers = pytest.importorskip("transformers")
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "balt", "##imore", "city", "in", "is"]
    (tmp_path / "vocab.txt").write_text("\n".join(vocab), encoding="utf-8")
    tok = transformers.BertTokenizerFast(str(tmp_path / "vocab.txt"))
    cfg = transformers.BertConfig(vocab_size=len(vocab), hidden_size=16, num_hidden_layers=1,
                                  num_attention_heads=2, intermediate_size=32)
    torch.manual_seed(0)
    transformers.BertModel(cfg).save_pretrained(tmp_path)
    tok.save_pretrained(tmp_path)
    return str(tmp_path)


def test_hf_encoder_first_subword_alignment(tmp_path):
    path = _local_bert(tmp_path)
    enc = build_encoder(path)
    hidden, firsts = enc.encode_words([["baltimore", "is", "city"]], 32)
    # [CLS] balt ##imore is city [SEP]
    assert firsts == [[1, 3, 4]]
    assert hidden.shape[-1] == 16
    hidden, firsts = enc.encode_words([["baltimore", "is", "city"]], 4)
    assert firsts == [[1, None, None]]
    m = BiEncoder(EncoderConfig(path, path, max_sequence_length=32))
    e_t, alignment = m.encode_tokens([["baltimore", "is", "city"]])
    assert e_t.shape == (3, 16) and alignment == [[0, 1, 2]]
