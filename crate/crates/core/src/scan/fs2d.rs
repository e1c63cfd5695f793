//! Serialization of feature maps along scan routes and the four-directional
//! selective scan.

use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::numerics::{Scalar, Tape, Tensor, Var};

use super::route::{make_route, ScanRoute, ScanStrategy};
use super::ssm::SsmLayer;

fn check_route(shape: &[usize], route: &ScanRoute) -> Result<(usize, usize)> {
    match *shape {
        [b, c, h, w] if h == route.h && w == route.w => Ok((b, c)),
        _ => Err(Error::shape(
            "serialize",
            format!("map {shape:?} vs {} route on {}x{}", route.strategy, route.h, route.w),
        )),
    }
}

/// `[B,C,H,W] -> [B,C,H*W]` in route order.
pub fn serialize<T: Scalar>(tape: &Tape<T>, x: Var, route: &ScanRoute) -> Result<Var> {
    let (b, c) = check_route(&tape.shape(x), route)?;
    let flat = tape.reshape(x, &[b, c, route.h * route.w])?;
    if route.strategy == ScanStrategy::HRaster {
        return Ok(flat);
    }
    tape.gather_last(flat, &route.order)
}

/// Inverse of [`serialize`].
pub fn deserialize<T: Scalar>(tape: &Tape<T>, seq: Var, route: &ScanRoute) -> Result<Var> {
    let shape = tape.shape(seq);
    let [b, c, l] = *shape.as_slice() else {
        return Err(Error::shape("deserialize", format!("sequence must be [B,C,L], got {shape:?}")));
    };
    if l != route.len() {
        return Err(Error::shape("deserialize", format!("length {l} vs route length {}", route.len())));
    }
    let grid = if route.strategy == ScanStrategy::HRaster {
        seq
    } else {
        tape.gather_last(seq, &route.inverse)?
    };
    tape.reshape(grid, &[b, c, route.h, route.w])
}

/// Plain-tensor [`serialize`].
pub fn serialize_tensor<T: Scalar>(x: &Tensor<T>, route: &ScanRoute) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let v = serialize(&tape, tape.constant(x.clone()), route)?;
    Ok(tape.tensor(v))
}

/// Plain-tensor [`deserialize`].
pub fn deserialize_tensor<T: Scalar>(seq: &Tensor<T>, route: &ScanRoute) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let v = deserialize(&tape, tape.constant(seq.clone()), route)?;
    Ok(tape.tensor(v))
}

/// Serialize, scan and deserialize along one route.
pub fn route_scan<T: Scalar>(ctx: &Ctx<T>, x: Var, route: &ScanRoute, ssm: &SsmLayer) -> Result<Var> {
    let seq = serialize(ctx.tape, x, route)?;
    let y = ssm.forward(ctx, seq)?;
    deserialize(ctx.tape, y, route)
}

/// Post-scan maps `Y_k` for the four directions, each `[B,C,H,W]`.
#[derive(Debug, Clone)]
pub struct DirectionalSequences {
    pub maps: [Var; 4],
    pub routes: [ScanRoute; 4],
}

pub fn fs2d<T: Scalar>(ctx: &Ctx<T>, x: Var, ssms: &[SsmLayer; 4]) -> Result<DirectionalSequences> {
    let shape = ctx.tape.shape(x);
    let [_, _, h, w] = *shape.as_slice() else {
        return Err(Error::shape("fs2d", format!("expected [B,C,H,W], got {shape:?}")));
    };
    let mut routes = Vec::with_capacity(4);
    let mut maps = Vec::with_capacity(4);
    for (k, strategy) in ScanStrategy::FOUR_DIRECTIONS.into_iter().enumerate() {
        let route = make_route(strategy, h, w)?;
        maps.push(route_scan(ctx, x, &route, &ssms[k])?);
        routes.push(route);
    }
    Ok(DirectionalSequences {
        maps: maps.try_into().expect("four maps"),
        routes: routes.try_into().expect("four routes"),
    })
}
