//! Response-curve fitting, two-sample tests, mixture clustering and the
//! convex-hull strategy area.

pub mod gmm;
pub mod hull;
pub mod ks;
pub mod logistic;
pub mod mann_whitney;

pub use gmm::{gmm_fit, GmmComponent, GmmConfig, GmmModel};
pub use hull::{convex_hull, point_in_convex_polygon, shoelace_area, strategy_area, StrategyArea};
pub use ks::{ks_test, KsResult};
pub use logistic::{logistic_fit, four_pl, LogisticFit};
pub use mann_whitney::{mann_whitney, MannWhitney};
