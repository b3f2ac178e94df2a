//! Two-way sliding-window marginalization. When the newest frame qualifies
//! as a keyframe, the oldest keyframe and the inverse depths it hosts are
//! folded into a Gaussian prior by Schur complement; otherwise the
//! second-newest frame is dropped outright and its inertial and clock
//! chains are composed by the caller, which is the exact marginal for
//! chain factors. Either way, surviving tracks hosted by the departing
//! frame are re-hosted with their depth transferred through the camera
//! geometry.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::estimator::solver::{
    build_layout, linearize, ClockLink, FactorGraph, GnssEpochFactor, ImuLink, MarginalPrior,
};
use crate::estimator::state::{KeyframeState, WindowState, KF_ERR_DIM};
use crate::estimator::EstimatorError;
use crate::vision::{CameraExtrinsics, MAX_DEPTH, MIN_DEPTH};

/// Marginalizes the oldest keyframe and the triangulated features it hosts
/// into a square-root Gaussian prior, then removes the frame from the
/// window, re-hosting its surviving tracks. The returned prior replaces
/// `graph.prior`; factors that referenced the departed frame are consumed
/// by it and must not be rebuilt by the caller.
pub fn marginalize_oldest(
    window: &mut WindowState,
    graph: &FactorGraph,
    huber_delta: f64,
) -> Result<MarginalPrior, EstimatorError> {
    if window.keyframes.len() < 2 {
        return Err(EstimatorError::WindowTooSmall { found: window.keyframes.len(), need: 2 });
    }
    let old_id = window.keyframes[0].id;

    // Keyframes entering the reduced problem: the departing frame, every
    // frame one of its factors touches, and the full support of the
    // existing prior.
    let mut involved: BTreeSet<u64> = BTreeSet::new();
    involved.insert(old_id);
    for link in &graph.imu {
        if link.i == 0 || link.j == 0 {
            involved.insert(window.keyframes[link.i].id);
            involved.insert(window.keyframes[link.j].id);
        }
    }
    for link in &graph.clock {
        if link.i == 0 || link.j == 0 {
            involved.insert(window.keyframes[link.i].id);
            involved.insert(window.keyframes[link.j].id);
        }
    }
    for ep in &graph.gnss {
        if ep.k0 == 0 || ep.k1 == 0 {
            involved.insert(window.keyframes[ep.k0].id);
            involved.insert(window.keyframes[ep.k1].id);
        }
    }
    for track in window.features.values() {
        if track.host == old_id && track.rho.is_some() {
            for id in track.obs.keys() {
                if window.slot_of(*id).is_some() {
                    involved.insert(*id);
                }
            }
        }
    }
    if let Some(prior) = &graph.prior {
        involved.extend(prior.kf_ids.iter().copied());
    }

    // Reduced window in slot order; the departing frame lands in slot 0.
    let mut temp_ids: Vec<u64> = involved.into_iter().collect();
    temp_ids.sort_unstable_by_key(|id| window.slot_of(*id).expect("involved frames are live"));
    debug_assert_eq!(temp_ids[0], old_id);
    let tslot = |window_slot: usize| {
        let id = window.keyframes[window_slot].id;
        temp_ids.iter().position(|t| *t == id).expect("touched frames are involved")
    };

    let mut temp = WindowState {
        keyframes: temp_ids
            .iter()
            .map(|id| window.keyframes[window.slot_of(*id).unwrap()].clone())
            .collect(),
        yaw_offset: window.yaw_offset,
        anchor: window.anchor.clone(),
        ..WindowState::default()
    };
    for (id, track) in &window.features {
        if track.host == old_id && track.rho.is_some() && track.obs.len() >= 2 {
            temp.features.insert(*id, track.clone());
        }
    }

    let mut tg = FactorGraph::new(graph.camera.clone(), graph.extrinsics.clone());
    tg.pixel_sigma = graph.pixel_sigma;
    tg.clock_chain_sigma = graph.clock_chain_sigma;
    tg.drift_walk_sigma = graph.drift_walk_sigma;
    tg.prior = graph.prior.clone();
    for link in &graph.imu {
        if link.i == 0 || link.j == 0 {
            tg.imu.push(ImuLink { i: tslot(link.i), j: tslot(link.j), preint: link.preint.clone() });
        }
    }
    for link in &graph.clock {
        if link.i == 0 || link.j == 0 {
            tg.clock.push(ClockLink { i: tslot(link.i), j: tslot(link.j), tau: link.tau });
        }
    }
    for ep in &graph.gnss {
        if ep.k0 == 0 || ep.k1 == 0 {
            tg.gnss.push(GnssEpochFactor {
                k0: tslot(ep.k0),
                k1: tslot(ep.k1),
                w: ep.w,
                observations: ep.observations.clone(),
                use_pseudorange: ep.use_pseudorange,
                use_doppler: ep.use_doppler,
            });
        }
    }

    let layout = build_layout(&temp);
    let sys = linearize(&temp, &tg, &layout, huber_delta)?;

    // Fold the inverse-depth columns into the dense block. This is exact
    // elimination of the hosted features, not a damped solve.
    let d = layout.dense_dim;
    let mut h = sys.hdd.clone();
    let mut g = sys.gd.clone();
    for f in 0..layout.feat_ids.len() {
        let c = sys.cff[f];
        if c <= 0.0 {
            continue;
        }
        let inv = 1.0 / c;
        let col = sys.hdf.column(f).clone_owned();
        for r in 0..d {
            if col[r] == 0.0 {
                continue;
            }
            for c2 in 0..d {
                h[(r, c2)] -= col[r] * col[c2] * inv;
            }
            g[r] -= col[r] * sys.gf[f] * inv;
        }
    }

    // Schur-eliminate the departing keyframe's block.
    let (h_kept, g_kept) = schur_reduce(&h, &g, KF_ERR_DIM);
    let (jac, rhs) = sqrt_form(&h_kept, &g_kept);
    let kept_ids = temp_ids[1..].to_vec();
    let lin_states = temp.keyframes[1..].to_vec();
    let prior = MarginalPrior::new(kept_ids, lin_states, temp.yaw_offset, jac, rhs);

    drop_frame(window, old_id, &graph.extrinsics);
    Ok(prior)
}

/// Removes a frame and every observation taken from it. Tracks it hosted
/// are re-hosted at their earliest surviving observation with the depth
/// transferred through the world point; tracks left without a usable host
/// are dropped. Inertial and clock factors spanning the frame are the
/// caller's to compose.
pub fn drop_frame(window: &mut WindowState, frame_id: u64, extrinsics: &CameraExtrinsics) {
    let Some(slot) = window.slot_of(frame_id) else { return };
    let old_state = window.keyframes[slot].clone();

    let mut rehost: Vec<(u64, u64, Option<f64>)> = Vec::new();
    let mut dead: Vec<u64> = Vec::new();
    for (id, track) in &window.features {
        if track.host != frame_id {
            continue;
        }
        let new_host = track
            .obs
            .keys()
            .copied()
            .find(|k| *k != frame_id && window.slot_of(*k).is_some());
        let Some(new_host) = new_host else {
            dead.push(*id);
            continue;
        };
        let rho = match track.rho {
            None => None,
            Some(rho) => {
                let host_ray = track.obs[&frame_id].ray;
                let new_state = &window.keyframes[window.slot_of(new_host).unwrap()];
                match transfer_depth(&old_state, &host_ray, rho, new_state, extrinsics) {
                    Some(r) => Some(r),
                    None => {
                        dead.push(*id);
                        continue;
                    }
                }
            }
        };
        rehost.push((*id, new_host, rho));
    }
    for id in dead {
        window.features.remove(&id);
    }
    for (id, host, rho) in rehost {
        let track = window.features.get_mut(&id).expect("re-hosted track exists");
        track.host = host;
        track.rho = rho;
    }
    for track in window.features.values_mut() {
        track.obs.remove(&frame_id);
    }
    window.keyframes.remove(slot);
}

/// Moves an inverse depth between hosting cameras through the feature's
/// world point, mirroring the reprojection model's transform chain. None
/// when the point leaves the usable depth range of the new host.
fn transfer_depth(
    old_host: &KeyframeState,
    host_ray: &Vector3<f64>,
    rho: f64,
    new_host: &KeyframeState,
    ext: &CameraExtrinsics,
) -> Option<f64> {
    if rho <= 0.0 {
        return None;
    }
    let p_cam = host_ray / rho;
    let p_w = old_host.motion.q * (ext.r_bc * p_cam + ext.p_bc) + old_host.motion.p;
    let in_body = new_host.motion.q.inverse() * (p_w - new_host.motion.p);
    let p_cam_new = ext.r_bc.inverse() * (in_body - ext.p_bc);
    if p_cam_new.z <= MIN_DEPTH || p_cam_new.z >= MAX_DEPTH {
        return None;
    }
    Some(1.0 / p_cam_new.z)
}

/// Schur complement of the leading `m`-column block of a PSD information
/// pair: returns the conditional information and gradient on the trailing
/// columns. Uses `C - W^T W` with `W = L^{-1} B^T` from a Cholesky of the
/// eliminated block, which keeps the result PSD to roundoff even when the
/// block's spectrum spans ten orders of magnitude; an eigenvalue
/// pseudo-inverse of the same `C - B A^+ B^T` form handles the singular
/// case, where null directions of the block carry no coupling to drop.
fn schur_reduce(h: &DMatrix<f64>, g: &DVector<f64>, m: usize) -> (DMatrix<f64>, DVector<f64>) {
    let d = h.nrows();
    let k = d - m;
    let h_mm = 0.5 * (h.view((0, 0), (m, m)) + h.view((0, 0), (m, m)).transpose());
    let h_rm = h.view((m, 0), (k, m)).clone_owned();
    let h_rr = h.view((m, m), (k, k)).clone_owned();
    let g_m = g.rows(0, m).clone_owned();
    let g_r = g.rows(m, k).clone_owned();

    if let Some(chol) = h_mm.clone().cholesky() {
        let l = chol.l();
        if let (Some(w), Some(y)) =
            (l.solve_lower_triangular(&h_rm.transpose()), l.solve_lower_triangular(&g_m))
        {
            let h_kept = &h_rr - w.transpose() * &w;
            let g_kept = &g_r - w.transpose() * y;
            return (h_kept, g_kept);
        }
    }

    let eig = h_mm.symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let floor = 1e-10 * lam_max.max(1.0);
    let mut pinv = DMatrix::zeros(m, m);
    for i in 0..m {
        let lam = eig.eigenvalues[i];
        if lam > floor {
            let v = eig.eigenvectors.column(i);
            pinv += (1.0 / lam) * &v * v.transpose();
        }
    }
    let h_kept = &h_rr - &h_rm * &pinv * h_rm.transpose();
    let g_kept = &g_r - &h_rm * &pinv * g_m;
    (h_kept, g_kept)
}

/// Square-root form of an information pair: returns (J, r) with J^T J
/// approximating `h` on its positive eigenspace and J^T r = projected `g`.
/// Negative eigenvalues, which can only be eigensolver roundoff here, clamp
/// to zero so the prior stays positive semidefinite.
fn sqrt_form(h: &DMatrix<f64>, g: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = h.nrows();
    let sym = 0.5 * (h + h.transpose());
    let eig = sym.symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    // Information here spans many orders of magnitude (tightly whitened
    // inertial rows against loosely whitened clock rows), so cancellation
    // in the Schur complement leaves roundoff negatives that scale with
    // the largest eigenvalue. They clamp to zero; only a relative excess
    // indicates a real indefiniteness bug.
    debug_assert!(
        eig.eigenvalues.iter().all(|&l| l > -1e-6 * lam_max.max(1.0)),
        "marginal information went indefinite beyond roundoff"
    );
    let floor = 1e-12 * lam_max.max(1.0);
    let kept: Vec<usize> =
        (0..n).filter(|&i| eig.eigenvalues[i] > floor).collect();
    let mut jac = DMatrix::zeros(kept.len(), n);
    let mut rhs = DVector::zeros(kept.len());
    for (row, &i) in kept.iter().enumerate() {
        let lam = eig.eigenvalues[i];
        let srt = lam.sqrt();
        let v = eig.eigenvectors.column(i);
        for c in 0..n {
            jac[(row, c)] = srt * v[c];
        }
        rhs[row] = v.dot(g) / srt;
    }
    (jac, rhs)
}
