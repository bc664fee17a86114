fn main() {
    println!("ccx: placeholder");
}
