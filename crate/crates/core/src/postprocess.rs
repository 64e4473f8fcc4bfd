//! Connected-component cleanup of predicted label volumes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::annotation::Seeds;
use crate::volume::{Geometry, LabelVolume, BACKGROUND};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Postprocess {
    #[default]
    None,
    LargestComponentPerClass,
}

fn neighbors26(geometry: &Geometry, i: usize, mut visit: impl FnMut(usize)) {
    let [nx, ny, nz] = geometry.dims;
    let [x, y, z] = geometry.coords(i);
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 && dz == 0 {
                    continue;
                }
                let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 || qz >= nz as i64 {
                    continue;
                }
                visit(geometry.index(qx as usize, qy as usize, qz as usize));
            }
        }
    }
}

/// 26-connected components of the voxels labeled `class_id`. Returns a
/// per-voxel component id (`u32::MAX` outside the class) and component sizes.
pub fn components(labels: &LabelVolume, class_id: u8) -> (Vec<u32>, Vec<usize>) {
    let geometry = labels.geometry();
    let data = labels.labels();
    let mut comp = vec![u32::MAX; data.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if data[start] != class_id || comp[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            neighbors26(geometry, i, |q| {
                if data[q] == class_id && comp[q] == u32::MAX {
                    comp[q] = id;
                    queue.push_back(q);
                }
            });
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Component to keep: the one touched first by a 26-connected breadth-first
/// search outward from the seeds (larger wins among those reached in the same
/// layer), or the largest one when there are no seeds.
fn chosen_component(geometry: &Geometry, comp: &[u32], sizes: &[usize], seeds: &[usize]) -> Option<u32> {
    if sizes.is_empty() {
        return None;
    }
    let largest = |ids: &mut dyn Iterator<Item = u32>| ids.max_by(|&a, &b| sizes[a as usize].cmp(&sizes[b as usize]).then(b.cmp(&a)));
    if seeds.is_empty() {
        return largest(&mut (0..sizes.len() as u32));
    }
    let mut seen = vec![false; comp.len()];
    let mut layer: Vec<usize> = Vec::new();
    for &s in seeds {
        if !seen[s] {
            seen[s] = true;
            layer.push(s);
        }
    }
    while !layer.is_empty() {
        let mut hit: Vec<u32> = layer.iter().map(|&i| comp[i]).filter(|&c| c != u32::MAX).collect();
        if !hit.is_empty() {
            hit.sort_unstable();
            hit.dedup();
            return largest(&mut hit.into_iter());
        }
        let mut next = Vec::new();
        for &i in &layer {
            neighbors26(geometry, i, |q| {
                if !seen[q] {
                    seen[q] = true;
                    next.push(q);
                }
            });
        }
        layer = next;
    }
    None
}

/// For each kidney class, keeps only the component containing (or nearest
/// to) that kidney's seeds and relabels every other component as background.
/// Classes without seeds keep their largest component.
pub fn keep_seeded_components(labels: &LabelVolume, seeds: &[Seeds]) -> LabelVolume {
    let geometry = *labels.geometry();
    let mut out = labels.clone();
    for class_id in 1..crate::volume::NUM_CLASSES as u8 {
        let (comp, sizes) = components(labels, class_id);
        let seed_idx: Vec<usize> = seeds
            .iter()
            .filter(|s| s.target.class_id() == class_id)
            .flat_map(|s| s.linear_indices(&geometry))
            .collect();
        let keep = chosen_component(&geometry, &comp, &sizes, &seed_idx);
        for (l, &c) in out.labels_mut().iter_mut().zip(&comp) {
            if c != u32::MAX && Some(c) != keep {
                *l = BACKGROUND;
            }
        }
    }
    out
}

pub fn apply(mode: Postprocess, labels: LabelVolume, seeds: &[Seeds]) -> LabelVolume {
    match mode {
        Postprocess::None => labels,
        Postprocess::LargestComponentPerClass => keep_seeded_components(&labels, seeds),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::Target;
    use proptest::prelude::*;

    fn volume(dims: [usize; 3], set: &[([usize; 3], u8)]) -> LabelVolume {
        let g = Geometry::with_dims(dims).unwrap();
        let mut labels = vec![0u8; g.len()];
        for &(p, c) in set {
            labels[g.index(p[0], p[1], p[2])] = c;
        }
        LabelVolume::new(g, labels).unwrap()
    }

    #[test]
    fn diagonal_neighbors_are_connected() {
        let v = volume([4, 4, 4], &[([0, 0, 0], 1), ([1, 1, 1], 1), ([3, 3, 3], 1)]);
        let (_, sizes) = components(&v, 1);
        assert_eq!(sizes, vec![2, 1]);
    }

    #[test]
    fn speck_is_removed_and_seeded_blob_kept() {
        let mut set = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                set.push(([x, y, 1], 1));
            }
        }
        set.push(([7, 7, 1], 1));
        set.push(([7, 0, 1], 2));
        let v = volume([8, 8, 3], &set);
        let seeds = [Seeds { target: Target::Right, voxels: vec![[1, 1, 1]] }];
        let out = keep_seeded_components(&v, &seeds);
        assert_eq!(out.count(1), 9);
        assert_eq!(out.get(7, 7, 1), 0);
        // Left class has no seeds and a single component, which stays.
        assert_eq!(out.count(2), 1);
        assert_eq!(apply(Postprocess::None, v.clone(), &seeds), v);
    }

    #[test]
    fn nearest_component_wins_over_larger_far_one() {
        let mut set = vec![([1, 1, 0], 1)];
        for x in 5..8 {
            for y in 5..8 {
                set.push(([x, y, 0], 1));
            }
        }
        let v = volume([8, 8, 1], &set);
        let seeds = [Seeds { target: Target::Right, voxels: vec![[0, 0, 0]] }];
        let out = keep_seeded_components(&v, &seeds);
        assert_eq!(out.count(1), 1);
        assert_eq!(out.get(1, 1, 0), 1);
    }

    proptest! {
        #[test]
        fn never_adds_kidney_voxels(cells in proptest::collection::vec(0u8..3, 125), sx in 0usize..5, sy in 0usize..5) {
            let g = Geometry::with_dims([5, 5, 5]).unwrap();
            let v = LabelVolume::new(g, cells).unwrap();
            let seeds = [
                Seeds { target: Target::Right, voxels: vec![[sx, sy, 2]] },
                Seeds { target: Target::Left, voxels: vec![[4 - sx, sy, 2]] },
            ];
            let out = keep_seeded_components(&v, &seeds);
            for (a, b) in v.labels().iter().zip(out.labels()) {
                prop_assert!(*b == *a || *b == 0);
            }
        }
    }
}
