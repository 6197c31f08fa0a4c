pub mod gradcheck;
pub mod oracles;
pub mod copyout;
