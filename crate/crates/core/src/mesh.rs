//! Structured periodic RVE meshes.
//!
//! The RVE is a cube `[0, edge_length]^3` discretized into a structured
//! grid of `divisions^3` trilinear hexahedra with 2x2x2 Gauss quadrature.
//! Spherical inclusions assign a phase id to every element whose centroid
//! falls inside a sphere; everything else is matrix material.
//!
//! # Node and element ordering
//!
//! Grid nodes are numbered x-fastest: `node(i, j, k) = i + (n+1)(j + (n+1)k)`.
//! Element corners follow the classic hexahedron convention with local
//! node 0 at `(-1,-1,-1)` and nodes 0..3 on the bottom face counted
//! counterclockwise, 4..7 above them.
//!
//! # Periodic map
//!
//! Fluctuation displacements are periodic: nodes on maximum faces are
//! slaved to their wrapped partner on the minimum face (edges and corners
//! canonicalize to the minimal-coordinate master in a single hop). One
//! corner class is anchored to zero to remove rigid translation. The
//! remaining masters form the `D` independent DOFs, ordered by node id
//! and axis.

use nalgebra::{DVector, Vector3};

use crate::error::{Error, Result};

/// Local corner coordinates of the reference hexahedron.
pub const HEX_CORNERS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

/// Spherical inclusion tagging elements by centroid membership.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Inclusion {
    pub center: [f64; 3],
    pub radius: f64,
    pub material_id: usize,
}

/// Geometric specification of the RVE.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MeshSpec {
    /// Cube edge length in mm.
    pub edge_length: f64,
    /// Elements per edge.
    pub divisions: usize,
    pub inclusions: Vec<Inclusion>,
    pub matrix_material_id: usize,
}

impl MeshSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.edge_length > 0.0) {
            return Err(Error::InvalidMesh(format!(
                "edge_length must be positive, got {}",
                self.edge_length
            )));
        }
        if self.divisions < 1 {
            return Err(Error::InvalidMesh("divisions must be at least 1".into()));
        }
        for (i, inc) in self.inclusions.iter().enumerate() {
            if !(inc.radius > 0.0) {
                return Err(Error::InvalidMesh(format!(
                    "inclusion {i} has nonpositive radius {}",
                    inc.radius
                )));
            }
            for ax in 0..3 {
                let c = inc.center[ax];
                if c - inc.radius <= 0.0 || c + inc.radius >= self.edge_length {
                    return Err(Error::InvalidMesh(format!(
                        "inclusion {i} touches or crosses the cube boundary in axis {ax}; \
                         periodic wrap of inclusions is unsupported"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One quadrature point in element-local coordinates.
#[derive(Debug, Clone, Copy)]
pub struct QuadPoint {
    pub xi: Vector3<f64>,
    pub weight: f64,
}

/// 2x2x2 Gauss rule on `[-1, 1]^3`, x-fastest ordering.
pub fn gauss_2x2x2() -> [QuadPoint; 8] {
    let g = 1.0 / 3.0_f64.sqrt();
    let mut pts = [QuadPoint {
        xi: Vector3::zeros(),
        weight: 1.0,
    }; 8];
    let mut idx = 0;
    for &c in &[-g, g] {
        for &b in &[-g, g] {
            for &a in &[-g, g] {
                pts[idx].xi = Vector3::new(a, b, c);
                idx += 1;
            }
        }
    }
    pts
}

/// Structured RVE mesh.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub spec: MeshSpec,
    /// Reference positions X, one per node.
    pub node_coords: Vec<Vector3<f64>>,
    /// Eight node ids per hexahedron.
    pub elements: Vec<[usize; 8]>,
    /// Material id per element.
    pub element_material: Vec<usize>,
    /// Quadrature rule shared by all elements.
    pub quadrature: Vec<QuadPoint>,
    /// Cell volume `edge_length^3`.
    pub volume: f64,
}

impl Mesh {
    pub fn num_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn element_centroid(&self, e: usize) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for &n in &self.elements[e] {
            c += self.node_coords[n];
        }
        c / 8.0
    }

    /// Total volume integrated by the quadrature rule over all elements.
    pub fn integrated_volume(&self) -> f64 {
        let mut v = 0.0;
        for e in 0..self.num_elements() {
            for qp in &self.quadrature {
                let (_, grads) = shape_eval(&qp.xi);
                let jac = self.jacobian(e, &grads);
                v += qp.weight * jac.determinant();
            }
        }
        v
    }

    /// Geometric Jacobian dX/dxi at one quadrature point of element `e`.
    pub fn jacobian(&self, e: usize, local_grads: &[[f64; 3]; 8]) -> nalgebra::Matrix3<f64> {
        let mut jac = nalgebra::Matrix3::zeros();
        for (k, &n) in self.elements[e].iter().enumerate() {
            let x = self.node_coords[n];
            for a in 0..3 {
                for b in 0..3 {
                    jac[(a, b)] += x[a] * local_grads[k][b];
                }
            }
        }
        jac
    }
}

/// Trilinear shape function values and local gradients at `xi` in `[-1,1]^3`.
///
/// Returns `(values, gradients)` where `gradients[k][b] = dN_k / dxi_b`.
pub fn shape_eval(xi: &Vector3<f64>) -> ([f64; 8], [[f64; 3]; 8]) {
    let mut vals = [0.0; 8];
    let mut grads = [[0.0; 3]; 8];
    for k in 0..8 {
        let [cx, cy, cz] = HEX_CORNERS[k];
        let fx = 1.0 + cx * xi.x;
        let fy = 1.0 + cy * xi.y;
        let fz = 1.0 + cz * xi.z;
        vals[k] = 0.125 * fx * fy * fz;
        grads[k][0] = 0.125 * cx * fy * fz;
        grads[k][1] = 0.125 * fx * cy * fz;
        grads[k][2] = 0.125 * fx * fy * cz;
    }
    (vals, grads)
}

/// Builds the structured RVE mesh described by `spec`.
pub fn build_rve_mesh(spec: &MeshSpec) -> Result<Mesh> {
    spec.validate()?;
    let n = spec.divisions;
    let h = spec.edge_length / n as f64;
    let nn = n + 1;

    let mut node_coords = Vec::with_capacity(nn * nn * nn);
    for k in 0..nn {
        for j in 0..nn {
            for i in 0..nn {
                node_coords.push(Vector3::new(i as f64 * h, j as f64 * h, k as f64 * h));
            }
        }
    }
    // node_coords was pushed k-outer but indexing must be x-fastest:
    // node(i,j,k) = i + nn*(j + nn*k), which the loop order above produces.

    let node = |i: usize, j: usize, k: usize| i + nn * (j + nn * k);

    let mut elements = Vec::with_capacity(n * n * n);
    let mut element_material = Vec::with_capacity(n * n * n);
    for ek in 0..n {
        for ej in 0..n {
            for ei in 0..n {
                let conn = [
                    node(ei, ej, ek),
                    node(ei + 1, ej, ek),
                    node(ei + 1, ej + 1, ek),
                    node(ei, ej + 1, ek),
                    node(ei, ej, ek + 1),
                    node(ei + 1, ej, ek + 1),
                    node(ei + 1, ej + 1, ek + 1),
                    node(ei, ej + 1, ek + 1),
                ];
                let centroid = Vector3::new(
                    (ei as f64 + 0.5) * h,
                    (ej as f64 + 0.5) * h,
                    (ek as f64 + 0.5) * h,
                );
                let mut mat = spec.matrix_material_id;
                for inc in &spec.inclusions {
                    let c = Vector3::new(inc.center[0], inc.center[1], inc.center[2]);
                    if (centroid - c).norm_squared() <= inc.radius * inc.radius {
                        mat = inc.material_id;
                        break;
                    }
                }
                elements.push(conn);
                element_material.push(mat);
            }
        }
    }

    Ok(Mesh {
        spec: spec.clone(),
        node_coords,
        elements,
        element_material,
        quadrature: gauss_2x2x2().to_vec(),
        volume: spec.edge_length.powi(3),
    })
}

/// Classification of one nodal DOF under the periodic constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofRef {
    /// Index into the free fluctuation vector of length D.
    Free(usize),
    /// Pinned to zero (anchor corner class).
    Anchored,
}

/// Periodic master/slave DOF map with one anchored corner class.
#[derive(Debug, Clone)]
pub struct PeriodicMap {
    /// Master node for every node (masters map to themselves).
    pub canonical: Vec<usize>,
    /// Master nodes carrying free DOFs, ascending; position r owns DOFs 3r..3r+3.
    pub free_nodes: Vec<usize>,
    /// Free-DOF base index per node (masters only), dense lookup.
    free_base: Vec<Option<usize>>,
    /// Nodal DOF pairs (slave, master) in global `3*node + axis` numbering.
    pub slave_pairs: Vec<(usize, usize)>,
    /// The anchored master node.
    pub anchor_node: usize,
    /// Number of independent fluctuation DOFs.
    pub d: usize,
}

impl PeriodicMap {
    /// Resolves node/axis to a free index or the anchor.
    #[inline]
    pub fn dof(&self, node: usize, axis: usize) -> DofRef {
        match self.free_base[self.canonical[node]] {
            Some(base) => DofRef::Free(base + axis),
            None => DofRef::Anchored,
        }
    }

    /// Restricts a full nodal vector (length `3 * num_nodes`) to the free DOFs.
    pub fn gather(&self, full: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.d);
        for (r, &node) in self.free_nodes.iter().enumerate() {
            for axis in 0..3 {
                out[3 * r + axis] = full[3 * node + axis];
            }
        }
        out
    }

    /// Expands a free vector to all nodes, copying masters onto slaves and
    /// zeroing the anchored class.
    pub fn scatter(&self, free: &DVector<f64>) -> DVector<f64> {
        assert_eq!(free.len(), self.d, "free vector length");
        let mut full = DVector::zeros(3 * self.canonical.len());
        for (node, &master) in self.canonical.iter().enumerate() {
            if let Some(base) = self.free_base[master] {
                for axis in 0..3 {
                    full[3 * node + axis] = free[base + axis];
                }
            }
        }
        full
    }
}

/// Builds the periodic map by coordinate matching with tolerance `1e-9`.
pub fn build_periodic_map(mesh: &Mesh) -> Result<PeriodicMap> {
    let tol = 1e-9;
    let edge = mesh.spec.edge_length;
    let nodes = &mesh.node_coords;

    // Wrapped target coordinates: every component on a maximum face folds to 0.
    let wrap = |x: &Vector3<f64>| {
        Vector3::new(
            if (x.x - edge).abs() <= tol { 0.0 } else { x.x },
            if (x.y - edge).abs() <= tol { 0.0 } else { x.y },
            if (x.z - edge).abs() <= tol { 0.0 } else { x.z },
        )
    };

    let find_node = |target: &Vector3<f64>| -> Result<usize> {
        let mut found = None;
        for (i, x) in nodes.iter().enumerate() {
            if (x - target).amax() <= tol {
                if let Some(prev) = found {
                    return Err(Error::GeometricMismatch(format!(
                        "nodes {prev} and {i} coincide at {target:?}"
                    )));
                }
                found = Some(i);
            }
        }
        found.ok_or_else(|| {
            Error::GeometricMismatch(format!("no node at wrapped position {target:?}"))
        })
    };

    let mut canonical = vec![usize::MAX; nodes.len()];
    let mut slave_pairs = Vec::new();
    for (i, x) in nodes.iter().enumerate() {
        let target = wrap(x);
        if (x - target).amax() <= tol {
            canonical[i] = i;
        } else {
            let master = find_node(&target)?;
            canonical[i] = master;
            for axis in 0..3 {
                slave_pairs.push((3 * i + axis, 3 * master + axis));
            }
        }
    }
    // Masters must be fixed points of the wrap (one-hop resolution).
    for (i, &m) in canonical.iter().enumerate() {
        if canonical[m] != m {
            return Err(Error::GeometricMismatch(format!(
                "slave chain longer than one hop at node {i}"
            )));
        }
    }

    let anchor_node = find_node(&Vector3::zeros())?;

    let mut free_nodes = Vec::new();
    let mut free_base = vec![None; nodes.len()];
    for (i, &m) in canonical.iter().enumerate() {
        if i == m && i != anchor_node {
            free_base[i] = Some(3 * free_nodes.len());
            free_nodes.push(i);
        }
    }

    Ok(PeriodicMap {
        canonical,
        d: 3 * free_nodes.len(),
        free_nodes,
        free_base,
        slave_pairs,
        anchor_node,
    })
}
