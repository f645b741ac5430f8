import json
import math

import numpy as np
import pytest

from coalroute.instances import (
    DEPOT_COORDS,
    SERVICE_RADII,
    Instance,
    Location,
    ValidationError,
    euclidean_distance,
    generate_instance,
    generate_instances,
    instance_from_dict,
    instance_to_dict,
    read_instance,
    sample_point_in_disc,
    write_instance,
)
from coalroute.rng import RngStream


def test_depot_coordinates_are_pinned():
    inst = generate_instance(RngStream(0, "depots"))
    assert (inst.depot(1).x, inst.depot(1).y) == (-0.2, 0.173)
    assert (inst.depot(2).x, inst.depot(2).y) == (0.2, 0.173)
    assert (inst.depot(3).x, inst.depot(3).y) == (0.0, -0.173)


def test_row_layout_and_ownership():
    inst = generate_instance(RngStream(3, "layout"))
    assert len(inst.deliveries) == 12
    for agent in (1, 2, 3):
        assert inst.deliveries[agent - 1].is_depot
        assert inst.deliveries[agent - 1].owner == agent
        rows = inst.customer_rows(agent)
        assert rows == tuple(range(3 + (agent - 1) * 3, 6 + (agent - 1) * 3))
        for r in rows:
            assert not inst.deliveries[r].is_depot
            assert inst.deliveries[r].owner == agent


def test_radii_come_from_the_allowed_set_and_customers_are_contained():
    for i, inst in enumerate(generate_instances(RngStream(11, "contain"), 500)):
        for r in inst.radii:
            assert r in SERVICE_RADII
        for agent in (1, 2, 3):
            for cust in inst.customers(agent):
                assert euclidean_distance(cust, inst.depot(agent)) <= inst.radii[agent - 1] + 1e-12


def test_radius_choices_cover_the_set():
    radii_seen = {1: set(), 2: set(), 3: set()}
    for inst in generate_instances(RngStream(5, "radii-cover"), 300):
        for agent in (1, 2, 3):
            radii_seen[agent].add(inst.radii[agent - 1])
    for agent in (1, 2, 3):
        assert radii_seen[agent] == set(SERVICE_RADII)


def test_uniform_disc_mean_distance_matches_two_thirds_radius():
    # Mean distance from the center of a uniform disc of radius R is 2R/3.
    rng = RngStream(21, "disc").generator()
    center = (0.0, -0.173)
    dists = []
    for _ in range(10_000):
        x, y = sample_point_in_disc(rng, center, 0.6)
        dists.append(math.hypot(x - center[0], y - center[1]))
    assert abs(np.mean(dists) - 0.4) < 0.01
    assert max(dists) <= 0.6


def test_same_stream_reproduces_identical_instance():
    a = generate_instance(RngStream(42, "weird/label"))
    b = generate_instance(RngStream(42, "weird/label"))
    assert a == b
    c = generate_instance(RngStream(42, "weird/label2"))
    assert c != a


def test_euclidean_distance_basics():
    p = Location(0.0, 0.0, 1, False)
    assert euclidean_distance(p, p) == 0.0
    q = Location(3.0, 4.0, 1, False)
    assert euclidean_distance(p, q) == 5.0
    d1 = Location(*DEPOT_COORDS[0], 1, True)
    d2 = Location(*DEPOT_COORDS[1], 2, True)
    assert abs(euclidean_distance(d1, d2) - 0.4) < 1e-12


def test_round_trip_through_disk_is_identity_and_stable(tmp_path):
    inst = generate_instance(RngStream(7, "roundtrip"))
    path = tmp_path / "inst.json"
    write_instance(inst, path)
    again = read_instance(path)
    assert again == inst
    # Re-serializing the parsed instance yields byte-identical output.
    path2 = tmp_path / "inst2.json"
    write_instance(again, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_matrix_encoding_shape_and_content():
    inst = generate_instance(RngStream(13, "matrix"))
    mat = inst.as_matrix()
    assert mat.shape == (12, 4)
    assert mat.dtype == np.float64
    assert list(mat[:3, 2]) == [1.0, 2.0, 3.0]
    assert list(mat[:3, 3]) == [1.0, 1.0, 1.0]
    assert set(mat[3:, 3]) == {0.0}


def _payload(mutate=None):
    inst = generate_instance(RngStream(100, "valid"))
    payload = instance_to_dict(inst)
    if mutate:
        mutate(payload)
    return payload


def test_validation_rejects_misplaced_depot():
    def mutate(p):
        p["deliveries"][1]["x"] = 0.25

    with pytest.raises(ValidationError, match="row 1"):
        instance_from_dict(_payload(mutate))


def test_validation_rejects_duplicate_depot_rows():
    def mutate(p):
        p["deliveries"][3] = dict(p["deliveries"][0])

    with pytest.raises(ValidationError, match="row 3"):
        instance_from_dict(_payload(mutate))


def test_validation_rejects_customer_outside_radius():
    def mutate(p):
        p["radii"] = [0.3, 0.3, 0.3]
        # Park a customer of agent 1 at distance 0.35 from its depot.
        p["deliveries"][4]["x"] = -0.2 + 0.35
        p["deliveries"][4]["y"] = 0.173

    with pytest.raises(ValidationError, match="row 4"):
        instance_from_dict(_payload(mutate))


def test_validation_rejects_bad_owner_and_radius():
    def bad_owner(p):
        p["deliveries"][5]["owner"] = 4

    with pytest.raises(ValidationError, match="row 5"):
        instance_from_dict(_payload(bad_owner))

    def bad_radius(p):
        p["radii"] = [0.3, 0.5, 0.6]

    with pytest.raises(ValidationError, match="radius"):
        instance_from_dict(_payload(bad_radius))


def test_validation_rejects_wrong_row_count_and_missing_fields():
    def drop_row(p):
        p["deliveries"] = p["deliveries"][:11]

    with pytest.raises(ValidationError, match="12"):
        instance_from_dict(_payload(drop_row))

    def drop_field(p):
        del p["deliveries"][6]["x"]

    with pytest.raises(ValidationError, match="row 6"):
        instance_from_dict(_payload(drop_field))


def test_read_instance_rejects_malformed_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ValidationError, match="JSON"):
        read_instance(path)


def test_direct_construction_validates_too():
    inst = generate_instance(RngStream(1, "direct"))
    rows = list(inst.deliveries)
    rows[3] = Location(5.0, 5.0, 1, False)
    with pytest.raises(ValidationError, match="row 3"):
        Instance(deliveries=tuple(rows), radii=inst.radii, seed=inst.seed)


def test_payload_seed_field_is_checked():
    payload = _payload()
    payload["seed"] = "abc"
    with pytest.raises(ValidationError, match="seed"):
        instance_from_dict(payload)
