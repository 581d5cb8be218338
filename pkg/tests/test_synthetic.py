from studyroute.model import Modality
from studyroute.synthetic import NETWORK_UNTRAINED, backend_class_lists, make_corpus


def test_corpus_shape_and_scrubbing(db):
    c = make_corpus(db, n_studies=12, seed=4)
    assert len(c.intact) == len(c.scrubbed) == len(c.truth) == 12
    for s in c.scrubbed:
        assert s.procedure_code is None and s.study_description is None
        assert all(x.series_description is None and not x.extra_meta for x in s.series)
    for s in c.intact:
        (label,) = c.truth[s.study_uid].labels
        assert label in db
        assert all(x.pixel_volume is not None for x in s.series)


def test_corpus_is_seeded(db):
    a, b = make_corpus(db, 6, seed=1), make_corpus(db, 6, seed=1)
    assert a.intact == b.intact and a.truth == b.truth
    assert make_corpus(db, 6, seed=2).truth != a.truth


def test_backend_lists_skip_untrained_classes(db):
    lists = backend_class_lists(db)
    assert set(lists) == {Modality.CT, Modality.CR, Modality.MR, Modality.US, Modality.XA}
    for classes in lists.values():
        assert not NETWORK_UNTRAINED & set(classes)
