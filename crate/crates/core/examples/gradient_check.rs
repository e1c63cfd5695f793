//! Finite-difference checks of every differentiable op, then of the block
//! components. Pass `model` to also check the whole Micro network (about a
//! minute and a half).

use fluxamba::suite::{run_scope, Scope};

fn main() -> fluxamba::Result<()> {
    let mut scopes = vec![Scope::Ops, Scope::Blocks];
    if std::env::args().nth(1).as_deref() == Some("model") {
        scopes.push(Scope::Model);
    }
    for scope in scopes {
        println!("[{scope}]");
        for r in run_scope(scope)? {
            println!("{r}");
        }
    }
    Ok(())
}
