fn main() { println!("rcmps"); }
