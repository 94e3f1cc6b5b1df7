import numpy as np
import pytest

from relexp.relstore import (
    AttributeDef,
    AttributeKind,
    Column,
    Database,
    DatabaseSchema,
    ForeignKey,
    Relation,
    RelationSchema,
    Task,
)

NUM = AttributeKind.NUMERIC
CAT = AttributeKind.CATEGORICAL


def make_relation(schema: RelationSchema, rows: list[tuple]) -> Relation:
    """Build a Relation from python row tuples (None = missing)."""
    columns = {}
    for j, attr in enumerate(schema.attributes):
        cells = [row[j] for row in rows]
        if attr.kind is NUM:
            values = np.array([np.nan if c is None else float(c) for c in cells])
            columns[attr.name] = Column(NUM, values)
        else:
            symbols: list[str] = []
            index: dict[str, int] = {}
            codes = np.empty(len(cells), dtype=np.int64)
            for i, c in enumerate(cells):
                if c is None:
                    codes[i] = -1
                else:
                    c = str(c)
                    if c not in index:
                        index[c] = len(symbols)
                        symbols.append(c)
                    codes[i] = index[c]
            columns[attr.name] = Column(CAT, codes, tuple(symbols))
    return Relation(schema, columns)


def make_db(schema: DatabaseSchema, data: dict[str, list[tuple]]) -> Database:
    return Database(
        schema,
        {name: make_relation(schema.relations[name], data.get(name, [])) for name in schema.relations},
    )


@pytest.fixture
def trial_schema() -> DatabaseSchema:
    """Clinical-trials-style star: studies <- designs, studies <- facilities_studies -> facilities."""
    studies = RelationSchema(
        "studies",
        (
            AttributeDef("nct_id", CAT),
            AttributeDef("phase", CAT),
            AttributeDef("enrollment", NUM),
            AttributeDef("outcome", NUM),
        ),
        ("nct_id",),
    )
    designs = RelationSchema(
        "designs",
        (
            AttributeDef("id", NUM),
            AttributeDef("nct_id", CAT),
            AttributeDef("allocation", CAT),
            AttributeDef("intervention_model", CAT),
            AttributeDef("primary_purpose", CAT),
        ),
        ("id",),
    )
    facilities = RelationSchema(
        "facilities",
        (
            AttributeDef("facility_id", NUM),
            AttributeDef("name", CAT),
            AttributeDef("city", CAT),
        ),
        ("facility_id",),
    )
    facilities_studies = RelationSchema(
        "facilities_studies",
        (
            AttributeDef("id", NUM),
            AttributeDef("nct_id", CAT),
            AttributeDef("facility_id", NUM),
        ),
        ("id",),
    )
    return DatabaseSchema(
        relations={
            "studies": studies,
            "designs": designs,
            "facilities": facilities,
            "facilities_studies": facilities_studies,
        },
        fks=(
            ForeignKey("fk_designs_studies", "designs", ("nct_id",), "studies"),
            ForeignKey("fk_fs_studies", "facilities_studies", ("nct_id",), "studies"),
            ForeignKey("fk_fs_facilities", "facilities_studies", ("facility_id",), "facilities"),
        ),
        target_relation="studies",
        task=Task.BINARY_CLASSIFICATION,
        label_attr="outcome",
    )


@pytest.fixture
def trial_db(trial_schema) -> Database:
    data = {
        "studies": [
            ("n1", "0", 120.0, 1.0),
            ("n2", "2", 40.0, 0.0),
            ("n3", "4", 85.0, 1.0),
            ("n4", "2", None, 0.0),
        ],
        "designs": [
            (1.0, "n1", "0", "1", "treatment"),
            (2.0, "n2", "1", "0", "prevention"),
            (3.0, "n3", "0", "0", "treatment"),
            (4.0, "n4", "2", "1", "screening"),
        ],
        "facilities": [
            (10.0, "General Hospital", "Boston"),
            (11.0, "City Clinic", "Haifa"),
        ],
        "facilities_studies": [
            (100.0, "n1", 10.0),
            (101.0, "n2", 10.0),
            (102.0, "n3", 11.0),
            (103.0, "n4", 11.0),
        ],
    }
    return make_db(trial_schema, data)


@pytest.fixture
def fig3_schema() -> DatabaseSchema:
    """Single relation with key A and data attrs B, C, F where F = 2 * C."""
    rel = RelationSchema(
        "t",
        (
            AttributeDef("a", NUM),
            AttributeDef("b", NUM),
            AttributeDef("c", NUM),
            AttributeDef("f", NUM),
        ),
        ("a",),
    )
    return DatabaseSchema(
        relations={"t": rel},
        fks=(),
        target_relation="t",
        task=Task.REGRESSION,
        label_attr="b",
    )


@pytest.fixture
def fig3_db(fig3_schema) -> Database:
    rows = [
        (1.0, 0.0, 1.0, 2.0),
        (2.0, 1.0, 2.0, 4.0),
        (3.0, 1.0, 3.0, 6.0),
        (4.0, 0.0, 4.0, 8.0),
    ]
    return make_db(fig3_schema, {"t": rows})


@pytest.fixture
def pair_schema() -> DatabaseSchema:
    """R(a) and T(a, b) with T referencing R: the smallest join fixture."""
    r = RelationSchema("r", (AttributeDef("a", NUM),), ("a",))
    t = RelationSchema(
        "t",
        (AttributeDef("a", NUM), AttributeDef("b", NUM), AttributeDef("y", NUM)),
        ("a", "b"),
    )
    return DatabaseSchema(
        relations={"r": r, "t": t},
        fks=(ForeignKey("fk_t_r", "t", ("a",), "r"),),
        target_relation="t",
        task=Task.REGRESSION,
        label_attr="y",
    )


@pytest.fixture
def pair_db(pair_schema) -> Database:
    return make_db(
        pair_schema,
        {
            "r": [(1.0,), (2.0,), (3.0,)],
            "t": [(1.0, 10.0, 0.5), (1.0, 20.0, 0.25), (2.0, 10.0, 0.75)],
        },
    )


@pytest.fixture
def fkfreq_db() -> Database:
    """T1.b references T2 with value counts (4, 1, 1)."""
    t2 = RelationSchema("t2", (AttributeDef("b", NUM), AttributeDef("z", NUM)), ("b",))
    t1 = RelationSchema(
        "t1",
        (AttributeDef("id", NUM), AttributeDef("b", NUM), AttributeDef("y", NUM)),
        ("id",),
    )
    schema = DatabaseSchema(
        relations={"t1": t1, "t2": t2},
        fks=(ForeignKey("fk_t1_t2", "t1", ("b",), "t2"),),
        target_relation="t1",
        task=Task.REGRESSION,
        label_attr="y",
    )
    data = {
        "t2": [(1.0, 0.1), (2.0, 0.2), (3.0, 0.3)],
        "t1": [
            (0.0, 1.0, 0.0),
            (1.0, 1.0, 0.0),
            (2.0, 1.0, 1.0),
            (3.0, 1.0, 1.0),
            (4.0, 2.0, 0.0),
            (5.0, 3.0, 1.0),
        ],
    }
    return make_db(schema, data)
