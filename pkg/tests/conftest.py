import pytest

from studyroute.evaluation import load_minor_errors
from studyroute.mapping_db import load_config, load_mapping_db


@pytest.fixture(scope="session")
def db():
    return load_mapping_db()


@pytest.fixture(scope="session")
def config(db):
    return load_config(db=db)


@pytest.fixture(scope="session")
def minor_table(db):
    return load_minor_errors(known_classes=db.class_ids)


@pytest.fixture(scope="session")
def disk_corpus(db, tmp_path_factory):
    """A small synthetic corpus written as DICOM, with oracle backend files and ground truth."""
    from studyroute.synthetic import make_corpus, write_dicom_corpus, write_truth_csv

    root = tmp_path_factory.mktemp("corpus")
    corpus = make_corpus(db, n_studies=24, seed=11)
    write_dicom_corpus(corpus.intact, root / "intact")
    write_dicom_corpus(corpus.scrubbed, root / "scrubbed")
    write_truth_csv(corpus.truth, root / "truth.csv")
    backend_args = []
    for mod, backend in sorted(corpus.backends.items(), key=lambda kv: kv[0].value):
        path = root / f"oracle_{mod.value}.csv"
        backend.to_csv(path)
        backend_args += ["--backend", f"{mod.value}={path}"]
    return root, backend_args
