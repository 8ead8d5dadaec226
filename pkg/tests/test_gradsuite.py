import pytest

from onnseg import gradsuite as G
from onnseg.autograd import ops as F
from onnseg.errors import ConfigurationError


def test_registry_covers_required_items():
    names = {i.name for i in G.registry()}
    required = {"conv2d", "batchnorm_train", "batchnorm_eval", "relu", "sigmoid", "tanh",
                "global_avg_pool", "global_max_pool", "avg_pool2d", "max_pool2d",
                "selfonn_q1", "selfonn_q2", "selfonn_q3", "dse", "csca_train", "clff",
                "soft_dice", "soft_jaccard", "dice_loss", "jaccard_loss", "combined_loss",
                "tiny_end_to_end"}
    assert required <= names


def test_tolerances():
    tol = {i.name: i.tol for i in G.registry()}
    assert tol["conv2d"] == tol["csca_train"] == 1e-6
    assert tol["dice_loss"] == 1e-7
    assert tol["tiny_end_to_end"] == 1e-5


def test_names_unique_and_ops_exist():
    items = G.registry()
    assert len({i.name for i in items}) == len(items)
    for i in items:
        if i.op is not None:
            assert callable(getattr(F, i.op))


def test_scope_selection():
    assert {i.module for i in G.select("objectives")} == {"objectives"}
    assert [i.name for i in G.select("dse")] == ["dse"]
    with pytest.raises(ConfigurationError):
        G.select("nope")


@pytest.mark.parametrize("op, blocks", [
    ("sigmoid", ["dse"]),
    ("power", ["selfonn_q3"]),
    ("conv2d", ["clff"]),
    ("global_max_pool", ["dse"]),
    ("div", ["soft_dice"]),
])
def test_injected_fault_is_caught_and_named(op, blocks):
    with G.inject_fault(op):
        results = [G.run_item(i, seeds=[0]) for i in G.select("tensor-core")]
        results += [G.run_item(i, seeds=[0]) for b in blocks for i in G.select(b)]
    assert G.culprits(results) == [op]
    failing = {r.name for r in results if not r.ok}
    assert set(blocks) <= failing
    text = G.format_results(results)
    assert f"culprit ops: {op}" in text


def test_fault_is_removed_afterwards():
    real = F.sigmoid
    with G.inject_fault("sigmoid"):
        assert F.sigmoid is not real
    assert F.sigmoid is real
    assert G.run_item(G.select("sigmoid")[0], seeds=[0]).ok


def test_inject_unknown_op():
    with pytest.raises(ConfigurationError):
        with G.inject_fault("no_such_op"):
            pass


def test_doubled_gradient_gives_half_error():
    with G.inject_fault("tanh"):
        r = G.run_item(G.select("tanh")[0], seeds=[1])
    # |2a - a| / max(|2a|, |a|)
    assert r.max_rel_err == pytest.approx(0.5, abs=1e-6)


def test_kink_retry_recovers_dense_block_seed():
    # seed 1 of the dense block puts a ReLU input within 1e-5 of zero; the
    # smaller steps see the smooth side and the item passes
    r = G.run_item(G.select("dense_block")[0], seeds=[1])
    assert r.ok, r
