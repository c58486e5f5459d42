import numpy as np
import pytest

from footprint_uq.domain import ValidationError
from footprint_uq.mesh import build_maps, build_mesh, lattice_positions


def brute_force_node_count(side, r):
    """Independent lattice-point enumeration over a generous candidate range."""
    dy = r * np.sqrt(3.0) / 2.0
    count = 0
    for k in range(0, 4 * side):
        for m in range(0, 4 * side):
            y = k * dy
            x = (r / 2.0 if k % 2 else 0.0) + m * r
            if y <= side - 1 + 1e-6 and x <= side - 1 + 1e-6:
                count += 1
    return count


class TestBuildMesh:
    def test_node_count_matches_enumeration_oracle(self):
        mesh = build_mesh(50, 4)
        assert mesh.n_nodes == brute_force_node_count(50, 4)

    def test_interior_degree_exactly_six(self):
        mesh = build_mesh(50, 4)
        interior = mesh.interior_nodes()
        assert interior.size > 0
        deg = mesh.degrees()
        assert np.all(deg[interior] == 6)
        assert deg.max() <= 6
        assert np.all(deg[deg < 6] >= 2)  # truncated boundary nodes keep 2-5

    def test_edges_symmetric_no_self_loops(self):
        mesh = build_mesh(30, 3)
        assert np.all(mesh.edges[:, 0] < mesh.edges[:, 1])
        directed = set(zip(mesh.dir_src.tolist(), mesh.dir_dst.tolist()))
        assert len(directed) == 2 * mesh.edges.shape[0]
        for a, b in mesh.edges:
            assert (int(a), int(b)) in directed and (int(b), int(a)) in directed
        assert not np.any(mesh.dir_src == mesh.dir_dst)

    def test_edge_lengths_equal_spacing(self):
        mesh = build_mesh(50, 4)
        p = mesh.positions
        lengths = np.linalg.norm(p[mesh.edges[:, 0]] - p[mesh.edges[:, 1]], axis=1)
        assert np.allclose(lengths, 4.0, atol=1e-6)

    def test_degenerate_single_row(self):
        mesh = build_mesh(10, 10)
        assert np.all(mesh.degrees() <= 2)

    def test_deterministic(self):
        a = build_mesh(50, 4)
        b = build_mesh(50, 4)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.edges, b.edges)

    def test_spacing_larger_than_side_rejected(self):
        with pytest.raises(ValidationError):
            build_mesh(10, 11)

    def test_lattice_row_offsets(self):
        pos = lattice_positions(20, 4)
        row1 = pos[np.isclose(pos[:, 0], 4 * np.sqrt(3) / 2)]
        assert np.allclose(row1[:, 1] % 4.0, 2.0)


class TestBuildMaps:
    def test_partition_exact(self):
        mesh = build_mesh(50, 4)
        maps = build_maps(mesh, 50)
        assert maps.assign.size == 2500
        assert maps.counts.sum() == 2500
        # cell_order groups cells contiguously by node
        assert np.array_equal(np.sort(maps.cell_order), np.arange(2500))
        grouped = maps.assign[maps.cell_order]
        assert np.all(np.diff(grouped) >= 0)

    def test_cell_at_node_distance_zero(self):
        mesh = build_mesh(50, 4)
        maps = build_maps(mesh, 50)
        node0 = mesh.positions[0]  # lattice origin is an integer cell
        cell = int(node0[0]) * 50 + int(node0[1])
        assert maps.assign[cell] == 0
        assert maps.distance[cell] == 0.0

    def test_tie_breaks_to_lowest_node_index(self):
        mesh = build_mesh(10, 2)
        maps = build_maps(mesh, 10)
        d2 = ((np.stack(np.meshgrid(np.arange(10), np.arange(10), indexing="ij"),
                        axis=2).reshape(-1, 1, 2) - mesh.positions[None]) ** 2).sum(axis=2)
        for cell in range(100):
            nearest = np.flatnonzero(np.isclose(d2[cell], d2[cell].min()))
            assert maps.assign[cell] == nearest[0]

    def test_distance_bounded_by_spacing(self):
        for side, r in ((50, 4), (20, 3), (10, 2)):
            mesh = build_mesh(side, r)
            maps = build_maps(mesh, side)
            assert maps.distance.max() <= r + 1e-6

    def test_pure_function_of_inputs(self):
        mesh = build_mesh(30, 4)
        a = build_maps(mesh, 30)
        b = build_maps(mesh, 30)
        assert np.array_equal(a.assign, b.assign)
        assert np.array_equal(a.distance, b.distance)
