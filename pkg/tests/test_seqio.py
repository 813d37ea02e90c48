"""Tests for FASTA parsing, vocabularies and tokenization."""
import numpy as np
import pytest

from src.ml.seqio import (
    DetokenizeError,
    FastaParseError,
    NucleotideSequence,
    SPECIAL_TOKENS,
    SUPPORTED_K,
    TokenSequence,
    Vocabulary,
    VocabularyError,
    build_vocab,
    detokenize,
    load_fasta,
    parse_fasta,
    tokenize,
    write_fasta,
)


def test_parse_concatenates_lines():
    """Sequence lines of one record are joined."""
    records = parse_fasta(b">s1\nACGT\nACGT\n")
    assert records == [("s1", NucleotideSequence("ACGTACGT"))]


def test_parse_uppercases_and_keeps_order():
    """Lowercase input is normalized; records keep file order."""
    records = parse_fasta(">a\nacgt\n>b\nTTTT\n")
    assert [h for h, _ in records] == ["a", "b"]
    assert str(records[0][1]) == "ACGT"
    assert str(records[1][1]) == "TTTT"


def test_parse_is_whitespace_insensitive():
    records = parse_fasta(">a\n  AC GT \n\nAA\r\n")
    assert str(records[0][1]) == "ACGTAA"


def test_parse_rejects_invalid_symbol_with_line_number():
    """U is not in the DNA alphabet."""
    with pytest.raises(FastaParseError) as excinfo:
        parse_fasta(">x\nACGU\n")
    assert excinfo.value.line_number == 2
    assert "line 2" in str(excinfo.value)


def test_parse_rejects_n_by_default():
    with pytest.raises(FastaParseError) as excinfo:
        parse_fasta(">x\nACGT\n>y\nACNT\n")
    assert excinfo.value.line_number == 4


def test_parse_skips_n_records_when_asked():
    records = parse_fasta(">x\nACGT\n>y\nACNT\n>z\nGG\n", skip_n_records=True)
    assert [h for h, _ in records] == ["x", "z"]


def test_parse_rejects_empty_record():
    with pytest.raises(FastaParseError):
        parse_fasta(">x\n>y\nACGT\n")


def test_parse_rejects_data_before_header():
    with pytest.raises(FastaParseError) as excinfo:
        parse_fasta("ACGT\n>x\nACGT\n")
    assert excinfo.value.line_number == 1


def test_parse_ignores_comment_lines():
    records = parse_fasta("; maskdna 0.1.0\n; seed=0\n>x\nAC\n")
    assert records == [("x", NucleotideSequence("AC"))]


def test_fasta_file_round_trip(tmp_path):
    """Records written with provenance comments read back unchanged."""
    records = [("a", NucleotideSequence("ACGT" * 30)), ("b", NucleotideSequence("TTGCA"))]
    path = tmp_path / "out.fa"
    write_fasta(records, path, comments=["maskdna test"], width=50)
    text = path.read_text()
    assert text.startswith("; maskdna test\n")
    assert load_fasta(path) == records


def test_nucleotide_sequence_validation():
    with pytest.raises(ValueError):
        NucleotideSequence("")
    with pytest.raises(ValueError):
        NucleotideSequence("ACGX")


@pytest.mark.parametrize("k", SUPPORTED_K)
def test_vocab_size_law(k):
    """|V| = 4^k + 9 for every supported k."""
    assert build_vocab(k).size == 4 ** k + 9


def test_vocab_k6_has_4105_entries():
    assert len(build_vocab(6)) == 4105


def test_vocab_k1_ids():
    vocab = build_vocab(1)
    assert vocab.size == 13
    assert [vocab.token_to_id[b] for b in "ACGT"] == [0, 1, 2, 3]


def test_vocab_k3_ids():
    vocab = build_vocab(3)
    assert vocab.size == 73
    assert vocab.token_to_id["AAA"] == 0
    assert vocab.token_to_id["TTT"] == 63
    assert vocab.mask_id == 64
    assert vocab.token_to_id["[M]"] == 64


def test_vocab_special_token_block():
    """Specials follow the k-mers in the fixed order."""
    vocab = build_vocab(3)
    assert [vocab.id_to_token[64 + i] for i in range(9)] == list(SPECIAL_TOKENS)
    assert vocab.pad_id == 65
    assert len(set(vocab.token_to_id.values())) == vocab.size


def test_vocab_is_deterministic():
    build_vocab.cache_clear()
    first = build_vocab(3)
    build_vocab.cache_clear()
    second = build_vocab(3)
    assert first.id_to_token == second.id_to_token
    assert first.token_to_id == second.token_to_id


def test_unsupported_k():
    with pytest.raises(VocabularyError, match="unsupported k"):
        build_vocab(5)


def test_vocab_file_format(tmp_path):
    """Header line k=<k>, then token<TAB>id sorted by id."""
    path = tmp_path / "vocab.txt"
    build_vocab(1).save(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "k=1"
    assert len(lines) == 14
    assert lines[1] == "A\t0"
    assert lines[5] == "[M]\t4"
    assert Vocabulary.load(path) == build_vocab(1)


def test_vocab_load_rejects_tampered_file(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("k=1\nA\t1\n")
    with pytest.raises(VocabularyError):
        Vocabulary.load(path)


def test_tokenize_two_windows():
    vocab = build_vocab(6)
    toks = tokenize(NucleotideSequence("AAAAAACCCCCC"), vocab)
    assert toks.ids.tolist() == [vocab.token_to_id["AAAAAA"], vocab.token_to_id["CCCCCC"]]


def test_tokenize_drops_remainder():
    vocab = build_vocab(6)
    toks = tokenize(NucleotideSequence("AAAAAAC"), vocab)
    assert toks.ids.tolist() == [vocab.token_to_id["AAAAAA"]]


def test_tokenize_k1():
    assert tokenize(NucleotideSequence("ACG"), build_vocab(1)).ids.tolist() == [0, 1, 2]


def test_tokenize_rejects_short_sequence():
    with pytest.raises(ValueError):
        tokenize(NucleotideSequence("ACG"), build_vocab(6))


def test_detokenize_first_id():
    assert str(detokenize([0], build_vocab(6))) == "AAAAAA"


@pytest.mark.parametrize("k", SUPPORTED_K)
def test_round_trip(k):
    """detokenize(tokenize(s)) == s when |s| is a multiple of k."""
    rng = np.random.default_rng(k)
    vocab = build_vocab(k)
    for _ in range(20):
        bases = "".join(rng.choice(list("ACGT"), size=k * int(rng.integers(1, 6))))
        assert str(detokenize(tokenize(NucleotideSequence(bases), vocab), vocab)) == bases


def test_round_trip_truncates_remainder():
    vocab = build_vocab(3)
    seq = NucleotideSequence("ACGTTGCA")
    assert str(detokenize(tokenize(seq, vocab), vocab)) == "ACGTTG"


def test_detokenize_rejects_special_with_position():
    vocab = build_vocab(6)
    with pytest.raises(DetokenizeError) as excinfo:
        detokenize([0, 5, vocab.mask_id], vocab)
    assert excinfo.value.position == 2


def test_token_sequence_invariants():
    with pytest.raises(ValueError):
        TokenSequence(np.array([0, 4]), vocab_k=1)
    with pytest.raises(ValueError):
        TokenSequence(np.array([0, 13]), vocab_k=1)
    toks = TokenSequence(np.array([0, 5]), vocab_k=1)
    assert toks == TokenSequence([0, 5], vocab_k=1)
    with pytest.raises(ValueError):
        toks.ids[0] = 1
