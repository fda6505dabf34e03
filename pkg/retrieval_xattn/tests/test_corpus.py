import pytest

from retrieval_xattn.corpus import Example, parse_corpus, read_corpus, write_corpus
from retrieval_xattn.errors import DataError, StorageError


def test_parse():
    examples = parse_corpus("4 5 6\t1 5 2\n\n7 8\t1 2\n")
    assert examples == [Example((4, 5, 6), (1, 5, 2)), Example((7, 8), (1, 2))]


@pytest.mark.parametrize("text, line", [
    ("4 5 6\n", 1),
    ("4 5\t1 2\n4 x\t1 2\n", 2),
    ("4 5\t\n", 1),
    ("4 -5\t1 2\n", 1),
    ("4 5\t1 2\n4 ² 5\t1 6 2\n", 2),
    ("4 ٣\t1 2\n", 1),
])
def test_malformed_lines_name_the_line(text, line):
    with pytest.raises(DataError) as err:
        parse_corpus(text)
    assert err.value.line == line


def test_vocabulary_bound():
    with pytest.raises(DataError, match="outside vocabulary"):
        parse_corpus("4 40\t1 2\n", vocab_size=32)


def test_file_round_trip(tmp_path):
    path = str(tmp_path / "corpus.tsv")
    examples = [Example((4, 5, 6, 7), (1, 6, 2)), Example((9,), (1, 2))]
    write_corpus(path, examples)
    assert read_corpus(path) == examples


def test_missing_file(tmp_path):
    with pytest.raises(StorageError):
        read_corpus(str(tmp_path / "absent.tsv"))
