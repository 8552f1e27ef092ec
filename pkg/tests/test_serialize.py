import json

import numpy as np
import pytest

from bilipren.bilip import BiLipHyper, direct_parameterize, theta_size
from bilipren.compose import FactorModel, SandwichModel, simulate, wrap_block
from bilipren.learning import TrainableFactor, TrainableSandwich
from bilipren.orthogonal import delay_dyn, make_static
from bilipren.ren import RenDims
from bilipren.serialize import (ModelFormatError, load_model, model_from_doc,
                                model_to_doc, save_model, weights_from_doc,
                                weights_to_doc)
from tests.test_compose import make_block, make_sandwich


class TestWeightsDoc:
    def test_round_trip_exact(self):
        hyper = BiLipHyper(mu=0.5, nu=2.0, dims=RenDims(3, 4, 2))
        rng = np.random.default_rng(0)
        wts, _ = direct_parameterize(rng.standard_normal(theta_size(hyper.dims)), hyper)
        doc = weights_to_doc(wts)
        back = weights_from_doc(json.loads(json.dumps(doc)))
        for name in ("A", "B1", "B2", "C1", "D11", "D12", "C2", "D21", "D22",
                     "bx", "bv", "by"):
            assert np.array_equal(getattr(back, name), getattr(wts, name))
        assert back.activation == wts.activation
        assert back.acyclic == wts.acyclic

    def test_schema_fields(self):
        hyper = BiLipHyper(mu=0.5, nu=2.0, dims=RenDims(2, 2, 1))
        wts, _ = direct_parameterize(np.zeros(theta_size(hyper.dims)), hyper)
        doc = weights_to_doc(wts)
        assert doc["dims"] == {"n": 2, "q": 2, "m": 1}
        assert doc["A"]["rows"] == 2 and doc["A"]["cols"] == 2
        assert len(doc["A"]["data"]) == 4
        assert doc["flags"] == {"acyclic": True}

    def test_bad_doc_rejected(self):
        with pytest.raises(ModelFormatError):
            weights_from_doc({"dims": {}})


class TestModelDoc:
    def test_sandwich_round_trip(self, tmp_path):
        model = make_sandwich(2, 0.25, 4.0, 2, 3, 1, seed=1)
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        assert isinstance(loaded, SandwichModel)
        assert loaded.mu == model.mu and loaded.nu == model.nu
        u = np.random.default_rng(2).standard_normal((20, 1))
        assert np.array_equal(simulate(loaded, u), simulate(model, u))
        cert = loaded.ren_blocks[0].certificate
        assert cert.lmi_min_eig > 0

    def test_factor_round_trip(self, tmp_path):
        outer = TrainableSandwich.create(m=1, blocks=1, mu=0.5, nu=2.0, n=2, q=3, seed=3)
        model = TrainableFactor(outer, p=4, seed=3).export()
        path = tmp_path / "factor.json"
        save_model(model, path)
        loaded = load_model(path)
        assert isinstance(loaded, FactorModel)
        u = np.random.default_rng(4).standard_normal((15, 1))
        assert np.array_equal(simulate(loaded, u), simulate(model, u))

    def test_block_round_trip(self):
        block = make_block(0.5, 2.0, 2, 3, 1, seed=5)
        doc = json.loads(json.dumps(model_to_doc(block)))
        loaded = model_from_doc(doc)
        assert loaded.certificate.kappa == pytest.approx(block.certificate.kappa)

    def test_layer_kind_tags(self):
        model = make_sandwich(1, 0.5, 2.0, 2, 2, 1, seed=6)
        doc = model_to_doc(model)
        kinds = [l["kind"] for l in doc["layers"]]
        assert kinds == ["static_ortho", "bilip_ren", "static_ortho"]
        fdoc = model_to_doc(FactorModel(inner=delay_dyn(1, 2), outer=model))
        assert fdoc["inner"]["kind"] == "dyn_ortho"

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "junk.json"
        path.write_text("{not json")
        with pytest.raises(ModelFormatError):
            load_model(path)
        path.write_text('{"kind": "mystery"}')
        with pytest.raises(ModelFormatError):
            load_model(path)
