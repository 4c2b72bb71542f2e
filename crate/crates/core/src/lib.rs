pub mod density;
pub mod ellipsoid;
pub mod error;
pub mod estimators;
pub mod family;
pub mod inference;
pub mod lab;
pub mod likelihood;
pub mod mve;
mod optim;
pub mod params;
pub mod probability;
pub mod quadrature;
pub mod sampling;
