import io

import numpy as np
import pytest

from hhedit.data import DataError, Dataset, Household, read_microdata, write_microdata
from hhedit.schema import load_schema

SCHEMA = load_schema(
    """
sizes: [2, 3]
variables:
- {name: Size, level: household, cardinality: 2, role: size}
- {name: Own, level: household, cardinality: 2}
- {name: Age, level: individual, cardinality: 4, ordered: true}
- {name: Rel, level: individual, cardinality: 3}
"""
)


def hh(size_code, own, ind):
    return Household(np.array([size_code, own], dtype=np.int32), np.array(ind, dtype=np.int32))


def small_dataset():
    return Dataset(
        SCHEMA,
        [
            hh(1, 2, [[3, 1], [2, 2]]),
            hh(2, 1, [[4, 1], [1, 2], [2, 3]]),
            hh(1, 0, [[3, 0], [2, 2]]),  # missing Own and one Age
        ],
    )


def test_groups_are_columnar_by_size():
    ds = small_dataset()
    groups = ds.groups()
    assert sorted(groups) == [2, 3]
    assert groups[2].hh.shape == (2, 2)
    assert groups[3].ind.shape == (1, 3, 2)
    rebuilt = Dataset.from_groups(SCHEMA, groups, len(ds), ids=ds.ids)
    for a, b in zip(rebuilt.households, ds.households):
        assert np.array_equal(a.hh, b.hh) and np.array_equal(a.ind, b.ind)


def test_size_cell_consistency_enforced():
    with pytest.raises(DataError, match="members"):
        Dataset(SCHEMA, [hh(2, 1, [[1, 1], [2, 2]])])  # says 3 members, has 2
    with pytest.raises(DataError, match="missing"):
        Dataset(SCHEMA, [hh(0, 1, [[1, 1], [2, 2]])])
    with pytest.raises(DataError, match="outside"):
        Dataset(SCHEMA, [hh(1, 3, [[1, 1], [2, 2]])])


def test_write_read_round_trip():
    ds = small_dataset()
    buf = io.StringIO()
    write_microdata(ds, buf)
    again = read_microdata(io.StringIO(buf.getvalue()), SCHEMA)
    assert again.ids == ds.ids
    for a, b in zip(again.households, ds.households):
        assert np.array_equal(a.hh, b.hh) and np.array_equal(a.ind, b.ind)
    # canonical writes are byte-identical
    buf2 = io.StringIO()
    write_microdata(again, buf2)
    assert buf.getvalue() == buf2.getvalue()


def test_sparse_household_layout_round_trips():
    ds = small_dataset()
    buf = io.StringIO()
    write_microdata(ds, buf, sparse_household=True)
    text = buf.getvalue()
    assert ",,," not in text.splitlines()[1]  # head row carries values
    again = read_microdata(io.StringIO(text), SCHEMA)
    for a, b in zip(again.households, ds.households):
        assert np.array_equal(a.hh, b.hh)


def test_missing_tokens():
    ds = small_dataset()
    buf = io.StringIO()
    write_microdata(ds, buf)
    assert "NA" in buf.getvalue()
    again = read_microdata(io.StringIO(buf.getvalue()), SCHEMA)
    assert again.households[2].hh[1] == 0
    assert again.households[2].ind[0, 1] == 0
    assert not again.fully_observed()


def _rows_to_text(rows):
    return "\n".join(["household_id,person_index,is_head,Size,Own,Age,Rel"] + rows) + "\n"


def test_reader_rejects_inconsistent_household_values():
    text = _rows_to_text(["1,1,1,1,1,2,1", "1,2,0,1,2,3,2"])  # Own differs within household
    with pytest.raises(DataError, match="inconsistent"):
        read_microdata(io.StringIO(text), SCHEMA)


def test_reader_rejects_gappy_person_index():
    text = _rows_to_text(["1,1,1,1,1,2,1", "1,3,0,1,1,3,2"])
    with pytest.raises(DataError, match="contiguous"):
        read_microdata(io.StringIO(text), SCHEMA)


def test_reader_rejects_missing_size():
    text = _rows_to_text(["1,1,1,NA,1,2,1", "1,2,0,NA,1,3,2"])
    with pytest.raises(DataError):
        read_microdata(io.StringIO(text), SCHEMA)


def test_reader_rejects_bad_header():
    text = "nope\n1,1,1,1,1,2,1\n"
    with pytest.raises(DataError, match="header"):
        read_microdata(io.StringIO(text), SCHEMA)


def test_reader_requires_one_head():
    text = _rows_to_text(["1,1,0,1,1,2,1", "1,2,0,1,1,3,2"])
    with pytest.raises(DataError, match="is_head"):
        read_microdata(io.StringIO(text), SCHEMA)
