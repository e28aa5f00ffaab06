use super::{Relation, SceneObject, ScenePose, Vocabulary};
use crate::error::{Error, Result};

/// Decomposes the floor-plane offset `(col, depth)` from the sender to a
/// point into (forward, leftward) components of the sender's facing frame.
fn sender_frame(offset: [f64; 3], facing: [f64; 3]) -> (f64, f64) {
    let (vc, vd) = (offset[1], offset[2]);
    let (fc, fd) = (facing[1], facing[2]);
    let forward = vc * fc + vd * fd;
    let leftward = -vc * fd + vd * fc;
    (forward, leftward)
}

/// Whether a directional relation holds for a point at `offset` from the
/// sender. `Near` is comparative and always returns `true` here; it is
/// resolved over the candidate set in [`resolve_referent`].
pub fn relation_holds(relation: Relation, offset: [f64; 3], facing: [f64; 3]) -> bool {
    let (a, b) = sender_frame(offset, facing);
    match relation {
        Relation::Front => a > b.abs(),
        Relation::Behind => -a > b.abs(),
        Relation::Left => b > a.abs(),
        Relation::Right => -b > a.abs(),
        Relation::Near => true,
    }
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Returns every object consistent with the `<color> <shape> <relation>`
/// phrase when read from the sender's perspective. A well-formed scene has
/// exactly one.
pub fn resolve_referent(
    objects: &[SceneObject],
    tokens: &[u32],
    pose: &ScenePose,
    vocabulary: &Vocabulary,
    height: usize,
    width: usize,
) -> Result<Vec<usize>> {
    vocabulary.check_tokens(tokens)?;
    let color = tokens.iter().find_map(|&t| vocabulary.color_of(t));
    let shape = tokens.iter().find_map(|&t| vocabulary.shape_of(t));
    let relation = tokens.iter().find_map(|&t| vocabulary.relation_of(t));

    let candidates: Vec<usize> = objects
        .iter()
        .enumerate()
        .filter(|(_, o)| color.is_none_or(|c| o.color == c) && shape.is_none_or(|s| o.shape == s))
        .map(|(i, _)| i)
        .collect();

    let offset = |i: usize| {
        let p = objects[i].position(height, width);
        [
            p[0] - pose.sender_center[0],
            p[1] - pose.sender_center[1],
            p[2] - pose.sender_center[2],
        ]
    };

    match relation {
        None => Ok(candidates),
        Some(Relation::Near) => {
            let dists: Vec<f64> = candidates
                .iter()
                .map(|&i| distance(objects[i].position(height, width), pose.sender_center))
                .collect();
            let Some(best) = dists.iter().copied().reduce(f64::min) else {
                return Ok(vec![]);
            };
            Ok(candidates
                .iter()
                .zip(&dists)
                .filter(|(_, &d)| d == best)
                .map(|(&i, _)| i)
                .collect())
        }
        Some(rel) => Ok(candidates
            .into_iter()
            .filter(|&i| relation_holds(rel, offset(i), pose.body_orientation))
            .collect()),
    }
}

/// Relations under which `target` is the unique phrase referent among its
/// same-category group. `near_margin` is the minimum ratio between the
/// second-nearest and nearest distances for `Near` to count.
pub(crate) fn unique_relations(
    objects: &[SceneObject],
    target: usize,
    pose: &ScenePose,
    vocabulary: &Vocabulary,
    height: usize,
    width: usize,
    near_margin: f64,
) -> Result<Vec<Relation>> {
    let group: Vec<usize> = (0..objects.len())
        .filter(|&i| objects[i].same_category(&objects[target]))
        .collect();
    if group.is_empty() {
        return Err(Error::Config("target missing from scene".into()));
    }
    let mut out = Vec::new();
    for &rel in &vocabulary.relations {
        let ok = match rel {
            Relation::Near => {
                let mut d: Vec<(f64, usize)> = group
                    .iter()
                    .map(|&i| {
                        (
                            distance(objects[i].position(height, width), pose.sender_center),
                            i,
                        )
                    })
                    .collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0));
                d[0].1 == target && (d.len() == 1 || d[1].0 >= near_margin * d[0].0)
            }
            _ => {
                let hits: Vec<usize> = group
                    .iter()
                    .copied()
                    .filter(|&i| {
                        let p = objects[i].position(height, width);
                        let off = [
                            p[0] - pose.sender_center[0],
                            p[1] - pose.sender_center[1],
                            p[2] - pose.sender_center[2],
                        ];
                        relation_holds(rel, off, pose.body_orientation)
                    })
                    .collect();
                hits == [target]
            }
        };
        if ok {
            out.push(rel);
        }
    }
    Ok(out)
}
