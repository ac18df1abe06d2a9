//! Half-vectorization of symmetric matrices: the scaled vech keeps inner
//! products, so <Q, X> = vech(Q) . vech(X).

use chordal_sdp::symcone::{eig_desc, mat, vech, SymMat};
use nalgebra::DMatrix;

fn main() {
    let q = SymMat::from_matrix(DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, -1.0, 0.0, -1.0, 1.0]));
    let x = SymMat::from_matrix(DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 1.0, 0.0, 0.2, 0.0, 2.0]));
    let vq = vech(&q);
    println!("vech(Q) = {:?}", vq.values().as_slice());
    println!("<Q, X> = {}  vech(Q).vech(X) = {}", (q.as_matrix() * x.as_matrix()).trace(), vq.dot(&vech(&x)));
    println!("mat(vech(Q)) == Q: {}", mat(&vq).as_matrix() == q.as_matrix());
    let (vals, _) = eig_desc(&q);
    println!("eigenvalues of Q, descending: {:?}", vals.as_slice());
}
