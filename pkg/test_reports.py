"""
Report templates, parsing and tokenizer - tests
Run: pytest test_reports.py
"""

import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).resolve().parent))

import pytest

from common.errors import ConfigurationError, InvalidInputError
from reports.templates import (
    KINDS, MAX_COMBINED_WORDS, MIN_TEMPLATES, count_words, load_template_library,
    parse_report, parse_sentence, parse_template_text, render_report,
)
from reports.tokenizer import (
    EOS_ID, PAD_ID, SOS_ID, UNK_ID, TokenSequence, Vocabulary, detokenize,
    normalize_text, pad_batch, tokenize,
)
from synth.abnormalities import LOBES, ROTATIONS, AbnormalitySpec, Lobe, Task, all_specs


@pytest.fixture(scope="module")
def lib():
    return load_template_library()


@pytest.fixture(scope="module")
def vocab(lib):
    return Vocabulary.build(s for _, _, s in lib.iter_sentences())


# ---------------------------------------------------------------------------
# Library + rendering
# ---------------------------------------------------------------------------

def test_library_coverage(lib):
    for value in (True, False):
        assert len(lib.candidates("mirror", value)) >= MIN_TEMPLATES
    for value in ROTATIONS:
        assert len(lib.candidates("rotation", value)) >= MIN_TEMPLATES
    for lobe in LOBES:
        assert len(lib.candidates("occlusion", lobe)) >= MIN_TEMPLATES


def test_published_example_is_renderable(lib):
    sentences = {t.fill(**slots) for t, slots in lib.candidates("rotation", 45)}
    assert "The image appears to have been affected by a counterclockwise rotation of 45 degrees." in sentences


def test_combined_report_structure(lib):
    report = render_report(AbnormalitySpec(False, 0, Lobe.LLL), lib, rng_seed=1)
    assert len(report.sentences) == 3
    assert report.n_words <= MAX_COMBINED_WORDS
    parsed = parse_report(report, lib)
    assert parsed.claim("mirror") is False
    assert parsed.claim("rotation") == 0


def test_longest_possible_combined_report_fits():
    lib = load_template_library()
    longest = {kind: 0 for kind in KINDS}
    for kind, _, sentence in lib.iter_sentences():
        longest[kind] = max(longest[kind], count_words(sentence))
    assert sum(longest.values()) <= MAX_COMBINED_WORDS


def test_render_is_deterministic(lib):
    spec = AbnormalitySpec(True, -45, Lobe.RUL)
    assert render_report(spec, lib, 9).text == render_report(spec, lib, 9).text


def test_single_task_reports_have_one_sentence(lib):
    assert len(render_report(AbnormalitySpec(mirrored=True), lib, 0, Task.MIRROR).sentences) == 1
    assert len(render_report(AbnormalitySpec(rotation_deg=90), lib, 0, Task.ROTATION).sentences) == 1
    assert len(render_report(AbnormalitySpec(occluded_lobe="RML"), lib, 0, Task.OCCLUSION).sentences) == 1


def test_occlusion_without_lobe_is_configuration_error(lib):
    with pytest.raises(ConfigurationError):
        render_report(AbnormalitySpec(), lib, 0, Task.OCCLUSION)


def test_library_validation_errors():
    with pytest.raises(ConfigurationError):
        parse_template_text("[mirror.positive]\nThe image is mirrored.\n").validate()
    with pytest.raises(ConfigurationError):
        parse_template_text("[nonsense]\nThe image.\n")
    with pytest.raises(ConfigurationError):
        parse_template_text("[occlusion]\nThe image is occluded.\n")
    with pytest.raises(ConfigurationError):
        parse_template_text("[mirror.positive]\nThe image isn't mirrored.\n")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def test_every_template_sentence_parses_back(lib, vocab):
    for kind, value, sentence in lib.iter_sentences():
        assert parse_sentence(sentence, lib) == (kind, value), sentence
        generated = detokenize(tokenize(sentence, vocab), vocab)
        assert parse_sentence(generated, lib) == (kind, value), generated


def test_render_parse_identity_all_specs(lib):
    for spec in all_specs():
        for seed in range(10):
            parsed = parse_report(render_report(spec, lib, seed), lib)
            assert parsed.to_spec() == spec
            assert not parsed.unparseable


def test_wrong_rotation_is_factually_wrong(lib):
    truth = AbnormalitySpec(False, -45, Lobe.LUL)
    parsed = parse_report("The image has been rotated by 90 degrees.", lib)
    assert parsed.claim("rotation") == 90
    assert parsed.matches(truth, Task.ROTATION) == {"rotation": False}
    assert not parsed.is_correct(truth)


def test_word_salad_is_unparseable(lib):
    parsed = parse_report("Lobe degrees mirrored banana the of.", lib)
    assert parsed.claims == {}
    assert parsed.unparseable == ["Lobe degrees mirrored banana the of."]


def test_conflicting_claims_are_dropped(lib):
    parsed = parse_report("The image is mirrored. The image is not mirrored.", lib)
    assert not parsed.has("mirror")
    assert parsed.conflicts == ["mirror"]


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

def test_tokenize_empty(vocab):
    assert tokenize("", vocab).ids == (SOS_ID, EOS_ID)


def test_tokenize_example(vocab):
    seq = tokenize("45 degrees.", vocab)
    assert [vocab.token_of(i) for i in seq.ids] == ["<sos>", "45", "degrees", ".", "<eos>"]


def test_corpus_round_trip_without_unknowns(lib, vocab):
    for _, _, sentence in lib.iter_sentences():
        seq = tokenize(sentence, vocab)
        assert UNK_ID not in seq.ids
        assert detokenize(seq, vocab) == normalize_text(sentence)


def test_unknown_word_maps_to_unk(vocab):
    assert tokenize("zebra", vocab).ids == (SOS_ID, UNK_ID, EOS_ID)


def test_token_sequence_validation(vocab):
    TokenSequence((SOS_ID, 5, EOS_ID)).validate(len(vocab))
    with pytest.raises(InvalidInputError):
        TokenSequence((5, EOS_ID)).validate(len(vocab))
    with pytest.raises(InvalidInputError):
        TokenSequence((SOS_ID, EOS_ID, 5)).validate(len(vocab))
    with pytest.raises(InvalidInputError):
        TokenSequence((SOS_ID, len(vocab))).validate(len(vocab))


def test_pad_batch(vocab):
    batch = pad_batch([tokenize("45 degrees.", vocab), tokenize("", vocab)])
    assert batch.shape == (2, 5)
    assert list(batch[1]) == [SOS_ID, EOS_ID, PAD_ID, PAD_ID, PAD_ID]


def test_vocabulary_save_load(tmp_path, vocab):
    vocab.save(tmp_path / "vocab.json")
    assert Vocabulary.load(tmp_path / "vocab.json").tokens == vocab.tokens
