pub mod attack;
pub mod bench;
pub mod make_fixture;
pub mod protect;
pub mod train_gen;
